"""Color overlays of label maps: class 1 blue, class 2 red, class 3 green."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import IGNORE_INDEX
from .imaging import as_image, as_labels

CLASS_COLORS = {
    1: (0, 0, 255),
    2: (255, 0, 0),
    3: (0, 255, 0),
}
IGNORE_COLOR = (255, 255, 0)


def overlay_rgb(img, labels, alpha: float = 0.5, hatch: int = 6) -> np.ndarray:
    """Grayscale base with class colors alpha-blended on top, as uint8 RGB.

    Ignored pixels get a diagonal yellow hatch so annotated and unannotated
    background stay distinguishable.
    """
    img = as_image(img, clamp=True)
    labels = as_labels(labels)
    if img.shape != labels.shape:
        raise ValueError(f"image {img.shape} and labels {labels.shape} disagree")
    base = np.repeat(img[..., None] * 255.0, 3, axis=-1)
    out = base.copy()
    for cls, color in CLASS_COLORS.items():
        sel = labels == cls
        out[sel] = (1 - alpha) * base[sel] + alpha * np.asarray(color, dtype=np.float64)
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    stripe = ((yy + xx) % hatch) < hatch // 2
    sel = (labels == IGNORE_INDEX) & stripe
    out[sel] = (1 - alpha) * base[sel] + alpha * np.asarray(IGNORE_COLOR, dtype=np.float64)
    return np.round(out).astype(np.uint8)


def render_overlay(img, labels, out, alpha: float = 0.5) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(overlay_rgb(img, labels, alpha)).save(out)
    return out
