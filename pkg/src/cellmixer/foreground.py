"""Unsupervised foreground extraction and image-level label assignment.

smooth -> Sobel magnitude -> smooth -> erode (xN) -> threshold -> closing ->
hole filling -> small-component removal. The gradient threshold marks cell
outlines; closing and hole filling turn closed outlines into solid cells.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CellMixerError, ParameterError
from .imaging import (
    StructuringElement,
    as_image,
    erode,
    gaussian_smooth,
    load_image,
    local_mean_threshold,
    otsu_threshold,
    save_labels,
    sobel_gradient_magnitude,
)

log = logging.getLogger(__name__)


@dataclass
class ExtractionConfig:
    sigma_pre: float = 1.0
    sigma_post: float = 1.0
    smooth_radius: int = 2
    erosion_size: int = 3
    erosion_rounds: int = 1
    threshold_mode: str = "otsu"  # "otsu" or "local_mean"
    threshold_window: int = 31
    otsu_bins: int = 256
    min_component_area: int = 30
    close_radius: int = 2

    def __post_init__(self):
        if not (self.sigma_pre > 0 and self.sigma_post > 0):
            raise ParameterError("smoothing sigmas must be positive")
        if self.smooth_radius < 1:
            raise ParameterError("smooth_radius must be >= 1")
        if self.erosion_rounds < 0:
            raise ParameterError("erosion_rounds must be >= 0")
        if self.min_component_area < 0:
            raise ParameterError("min_component_area must be >= 0")
        if self.close_radius < 0:
            raise ParameterError("close_radius must be >= 0")
        if self.threshold_mode not in ("otsu", "local_mean"):
            raise ParameterError(f"unknown threshold_mode {self.threshold_mode!r}")

    @property
    def erosion_element(self) -> StructuringElement:
        return StructuringElement.square(self.erosion_size)

    def to_dict(self) -> dict:
        return asdict(self)


def processed_gradient(img, cfg: ExtractionConfig) -> np.ndarray:
    """Smoothed, eroded Sobel magnitude: the field that gets thresholded."""
    smoothed = gaussian_smooth(img, cfg.sigma_pre, cfg.smooth_radius)
    g = sobel_gradient_magnitude(smoothed)
    g = gaussian_smooth(g, cfg.sigma_post, cfg.smooth_radius)
    b = cfg.erosion_element
    for _ in range(cfg.erosion_rounds):
        g = erode(g, b)
    return g


def _binary_close(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask
    fp = StructuringElement.disk(radius).footprint()
    # pad by replication so closing does not eat into objects at the border
    padded = np.pad(mask, radius, mode="edge")
    closed = ndimage.binary_closing(padded, structure=fp)
    return closed[radius:-radius, radius:-radius]


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1:
        return mask
    labeled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return mask
    areas = np.bincount(labeled.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labeled]


def extract_foreground(img, cfg: ExtractionConfig | None = None) -> np.ndarray:
    cfg = cfg or ExtractionConfig()
    img = as_image(img)
    if min(img.shape) < 3:
        raise ParameterError("image must be at least 3x3")
    g = processed_gradient(img, cfg)
    if cfg.threshold_mode == "otsu":
        mask = g >= otsu_threshold(g, cfg.otsu_bins)
    else:
        mask = local_mean_threshold(g, cfg.threshold_window)
    mask = _binary_close(mask, cfg.close_radius)
    mask = ndimage.binary_fill_holes(mask)
    return remove_small_components(mask, cfg.min_component_area)


def assign_label(fg, class_index: int) -> np.ndarray:
    if class_index not in (1, 2, 3):
        raise ParameterError(f"class_index must be 1, 2 or 3, got {class_index}")
    fg = np.asarray(fg, dtype=bool)
    return np.where(fg, np.uint8(class_index), np.uint8(0)).astype(np.uint8)


@dataclass
class ExtractionReport:
    processed: int = 0
    failed: int = 0
    failures: list = field(default_factory=list)
    foreground_fraction: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def extract_batch(manifest, cfg: ExtractionConfig, out_dir, workers: int = 1):
    """Extract label maps for every manifest record carrying a whole-image class.

    Returns ``(report, labeled_manifest)``; the new manifest points each
    record at its extracted label map. Unreadable or degenerate images are
    recorded in the report and left out of the new manifest.
    """
    from .manifest import DatasetManifest, Record

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        i, rec = item
        if rec.cls is None:
            raise ParameterError("record has no whole-image class")
        img = load_image(manifest.resolve(rec.image))
        fg = extract_foreground(img, cfg)
        name = f"{i:05d}_{Path(rec.image).stem}_labels.png"
        save_labels(out_dir / name, assign_label(fg, rec.cls))
        return name, float(fg.mean())

    def safe(item):
        try:
            return work(item), None
        except (CellMixerError, OSError) as exc:
            return None, str(exc)

    items = list(enumerate(manifest.records))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(safe, items))
    else:
        results = [safe(it) for it in items]

    report = ExtractionReport()
    fractions: dict[int, list[float]] = {}
    records = []
    for (i, rec), (res, err) in zip(items, results):
        if err is not None:
            report.failed += 1
            report.failures.append({"index": i, "image": rec.image, "error": err})
            log.warning("extraction failed for %s: %s", rec.image, err)
            continue
        name, frac = res
        report.processed += 1
        fractions.setdefault(rec.cls, []).append(frac)
        records.append(
            Record(image=str(manifest.resolve(rec.image).resolve()), labels=name, cls=rec.cls, split=rec.split)
        )
    report.foreground_fraction = {str(c): float(np.mean(v)) for c, v in sorted(fractions.items())}
    return report, DatasetManifest(records, root=out_dir)
