"""Synthetic brightfield-like phantoms with exact ground truth.

Each class has a distinct look so that per-class metrics are meaningful:

* class 1: small cells with a dark membrane ring and a near-background interior
* class 2: large cells with a bright, smooth interior and a thin dark rim
* class 3: small cells with strong interior speckle

Cells are ellipses stamped with an anti-aliased edge. A pixel belongs to a
cell in the truth map exactly when its center lies inside the ellipse, which
is also where the stamp coverage reaches 0.5. Later stamps overwrite earlier
ones, so touching and slightly overlapping cells are possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class ClassStyle:
    radius: tuple[float, float]
    eccentricity: tuple[float, float]
    interior: float  # interior intensity offset from the background level
    ring: float  # membrane intensity offset (negative = dark ring)
    ring_width: float
    speckle: float  # std of interior speckle
    ring_depth: float = 1.0  # membrane center, in ring widths inside the boundary
    interior_jitter: float = 0.0  # per-cell std of the interior offset
    speckle_jitter: float = 0.0  # per-cell relative std of the speckle amplitude


DEFAULT_STYLES = {
    1: ClassStyle(radius=(9.0, 11.0), eccentricity=(0.0, 0.35), interior=-0.06, ring=-0.25, ring_width=1.5, speckle=0.01,
                  ring_depth=2.0, interior_jitter=0.04, speckle_jitter=0.4),
    2: ClassStyle(radius=(12.0, 15.0), eccentricity=(0.0, 0.3), interior=0.22, ring=-0.05, ring_width=1.2, speckle=0.01,
                  ring_depth=0.0, interior_jitter=0.04, speckle_jitter=0.4),
    3: ClassStyle(radius=(8.0, 10.0), eccentricity=(0.0, 0.4), interior=-0.02, ring=-0.12, ring_width=1.0, speckle=0.08,
                  interior_jitter=0.04, speckle_jitter=0.4),
}


@dataclass
class PhantomConfig:
    image_size: int = 160
    cells_per_image: tuple[int, int] = (10, 16)
    bg_mean: float = 0.55
    bg_mean_jitter: float = 0.08
    bg_noise: float = 0.03
    max_overlap: float = 0.15
    max_retries: int = 200
    seed: int = 0
    class_styles: dict = field(default_factory=lambda: dict(DEFAULT_STYLES))

    def __post_init__(self):
        if self.image_size < 8:
            raise ParameterError("image_size must be >= 8")
        lo, hi = self.cells_per_image
        if lo < 0 or hi < lo:
            raise ParameterError(f"invalid cells_per_image range {self.cells_per_image}")
        for c in (1, 2, 3):
            if c not in self.class_styles:
                raise ParameterError(f"missing style for class {c}")
            if self.class_styles[c].radius[0] < 2:
                raise ParameterError("cell radii must be >= 2 px")
        if not 0 <= self.bg_mean <= 1:
            raise ParameterError("bg_mean must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_styles"] = {str(k): asdict(v) for k, v in self.class_styles.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "class_styles" in d:
            d["class_styles"] = {
                int(k): ClassStyle(**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
                for k, v in d["class_styles"].items()
            }
        if "cells_per_image" in d:
            d["cells_per_image"] = tuple(d["cells_per_image"])
        return cls(**d)


@dataclass
class PhantomImage:
    image: np.ndarray
    labels: np.ndarray
    placed: int
    skipped: int


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, index])


class _Canvas:
    def __init__(self, size: int, bg: float, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.bg = bg
        self.offset = np.zeros((size, size))  # intensity offset from background
        self.labels = np.zeros((size, size), dtype=np.uint8)
        self.yy, self.xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def try_place(self, cls: int, style: ClassStyle, max_overlap: float, retries: int) -> bool:
        rng = self.rng
        for _ in range(retries):
            r = rng.uniform(*style.radius)
            e = rng.uniform(*style.eccentricity)
            a = r / np.sqrt(1.0 - e * e) ** 0.5
            b = r * np.sqrt(1.0 - e * e) ** 0.5
            theta = rng.uniform(0, np.pi)
            margin = a + 2
            if self.size <= 2 * margin:
                return False
            cy, cx = rng.uniform(margin, self.size - margin, size=2)
            rho, r_eff = self._ellipse(cy, cx, a, b, theta)
            inside = rho <= 1.0
            area = inside.sum()
            if area == 0:
                continue
            if (self.labels[inside] > 0).sum() > max_overlap * area:
                continue
            self._stamp(cls, style, rho, r_eff, inside)
            return True
        return False

    def _ellipse(self, cy, cx, a, b, theta):
        dy = self.yy - cy
        dx = self.xx - cx
        c, s = np.cos(theta), np.sin(theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        return rho, np.sqrt(a * b)

    def _stamp(self, cls, style, rho, r_eff, inside):
        # signed distance estimate to the boundary, positive inside
        depth = (1.0 - rho) * r_eff
        alpha = np.clip(depth + 0.5, 0.0, 1.0)
        touched = alpha > 0
        # membrane sits just inside the boundary
        ring = np.exp(-0.5 * ((depth - style.ring_depth * style.ring_width) / max(style.ring_width, 1e-6)) ** 2)
        interior = style.interior + style.interior_jitter * self.rng.standard_normal()
        speckle = style.speckle * max(0.0, 1.0 + style.speckle_jitter * self.rng.standard_normal())
        tex = interior + (style.ring - interior) * ring
        if speckle > 0:
            tex = tex + speckle * self.rng.standard_normal(tex.shape) * (depth > 1.0)
        self.offset[touched] = (1 - alpha[touched]) * self.offset[touched] + alpha[touched] * tex[touched]
        self.labels[inside] = cls

    def render(self, noise: float) -> np.ndarray:
        img = self.bg + self.offset + noise * self.rng.standard_normal(self.offset.shape)
        return np.clip(img, 0.0, 1.0)


def _render(classes_for_cells, cfg: PhantomConfig, rng) -> PhantomImage:
    bg = float(np.clip(cfg.bg_mean + rng.uniform(-cfg.bg_mean_jitter, cfg.bg_mean_jitter), 0, 1))
    canvas = _Canvas(cfg.image_size, bg, rng)
    placed = skipped = 0
    for cls in classes_for_cells:
        ok = canvas.try_place(int(cls), cfg.class_styles[int(cls)], cfg.max_overlap, cfg.max_retries)
        placed += ok
        skipped += not ok
    return PhantomImage(canvas.render(cfg.bg_noise), canvas.labels, placed, skipped)


def generate_population(class_index: int, n_images: int, cfg: PhantomConfig | None = None) -> list[PhantomImage]:
    """Homogeneous images: every cell in every image belongs to ``class_index``."""
    cfg = cfg or PhantomConfig()
    if class_index not in (1, 2, 3):
        raise ParameterError(f"class_index must be 1, 2 or 3, got {class_index}")
    out = []
    for i in range(n_images):
        rng = _rng(cfg.seed, class_index, i)
        n_cells = int(rng.integers(cfg.cells_per_image[0], cfg.cells_per_image[1] + 1))
        out.append(_render([class_index] * n_cells, cfg, rng))
    return out


def parse_mix(spec: str) -> list[tuple[int, float]]:
    """Parse ``"1:0.5,2:0.5"`` into ``[(1, 0.5), (2, 0.5)]``."""
    out = []
    for part in spec.split(","):
        k, _, p = part.partition(":")
        try:
            out.append((int(k), float(p)))
        except ValueError as exc:
            raise ParameterError(f"bad mixture entry {part!r}") from exc
    return out


def generate_true_mixture(class_mix, n_images: int, cfg: PhantomConfig | None = None) -> list[PhantomImage]:
    """Heterogeneous scenes drawn in one pass, with classes sampled by proportion."""
    cfg = cfg or PhantomConfig()
    classes = [int(c) for c, _ in class_mix]
    probs = np.array([float(p) for _, p in class_mix])
    if any(c not in (1, 2, 3) for c in classes):
        raise ParameterError("mixture classes must be in {1, 2, 3}")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ParameterError(f"mixture proportions must be >= 0 and sum to 1, got {probs.sum()}")
    # stream 0 is reserved for mixtures; populations use their class index
    stream = 100 + sum(c * 10 ** k for k, c in enumerate(classes))
    out = []
    for i in range(n_images):
        rng = _rng(cfg.seed, stream, i)
        n_cells = int(rng.integers(cfg.cells_per_image[0], cfg.cells_per_image[1] + 1))
        cells = rng.choice(classes, size=n_cells, p=probs)
        out.append(_render(cells, cfg, rng))
    return out
