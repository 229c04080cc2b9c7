"""JSON-lines dataset manifests and the stratified validation split.

One record per line::

    {"image": "img/0001.png", "labels": null, "class": 1, "split": "train"}

Relative paths resolve against the directory holding the manifest file.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Record:
    image: str
    labels: str | None = None
    cls: int | None = None
    split: str = "train"

    def __post_init__(self):
        if self.cls is not None and self.cls not in (0, 1, 2, 3):
            raise ParameterError(f"class must be 0-3 or null, got {self.cls}")
        if self.split not in SPLITS:
            raise ParameterError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> dict:
        return {"image": self.image, "labels": self.labels, "class": self.cls, "split": self.split}

    @classmethod
    def from_json(cls, obj: dict) -> "Record":
        if "image" not in obj:
            raise DataError(f"record lacks an 'image' field: {obj}")
        try:
            return cls(
                image=str(obj["image"]),
                labels=obj.get("labels"),
                cls=None if obj.get("class") is None else int(obj["class"]),
                split=obj.get("split", "train"),
            )
        except ParameterError as exc:
            raise DataError(str(exc)) from exc


class DatasetManifest:
    """Ordered records plus the root directory their relative paths hang off."""

    schema_version = SCHEMA_VERSION

    def __init__(self, records=(), root="."):
        self.records = list(records)
        self.root = Path(root)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split], self.root)

    def class_counts(self) -> dict:
        counts: dict = defaultdict(int)
        for r in self.records:
            counts[r.cls] += 1
        return dict(counts)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: invalid JSON: {exc}") from exc
            records.append(Record.from_json(obj))
        return cls(records, root=path.parent)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for r in self.records:
                f.write(json.dumps(r.to_json()) + "\n")


def round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


def split_manifest(manifest: DatasetManifest, val_fraction: float = 0.10, seed: int = 0) -> DatasetManifest:
    """Tag ``round_half_up(val_fraction * n_c)`` records of each class as ``val``.

    Records already tagged ``test`` are left alone; everything else becomes
    ``train`` or ``val``. Stratification is by the record's class (records
    without a class form their own stratum).
    """
    if not 0 <= val_fraction <= 1:
        raise ParameterError("val_fraction must lie in [0, 1]")
    frac = Fraction(str(val_fraction))
    strata: dict = defaultdict(list)
    for i, r in enumerate(manifest.records):
        if r.split != "test":
            strata[r.cls].append(i)
    val = set()
    rng = np.random.default_rng(seed)
    for key in sorted(strata, key=lambda k: -1 if k is None else k):
        idx = strata[key]
        k = round_half_up(frac * len(idx))
        order = rng.permutation(len(idx))
        val.update(idx[j] for j in order[:k])
    records = [
        r if r.split == "test" else replace(r, split="val" if i in val else "train")
        for i, r in enumerate(manifest.records)
    ]
    return DatasetManifest(records, manifest.root)
