"""Sidecar provenance entries for written artifacts."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__

SIDECAR = "provenance.json"


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def record(out_dir, artifacts, config, seed) -> Path:
    """Add ``artifacts`` (names relative to ``out_dir``) to the directory's sidecar."""
    out_dir = Path(out_dir)
    path = out_dir / SIDECAR
    entries = json.loads(path.read_text()) if path.exists() else {}
    entry = {"config_hash": config_hash(config), "seed": int(seed), "tool_version": __version__}
    for name in artifacts:
        entries[str(name)] = entry
    path.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")
    return path
