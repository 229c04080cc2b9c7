"""Raster primitives: smoothing, Sobel gradients, erosion, thresholds, I/O.

Images are 2-D ``float64`` arrays of shape ``(height, width)`` with values in
``[0, 1]``. Gradient fields are nonnegative float arrays, masks are ``bool``
arrays and label maps are ``uint8`` arrays. Every neighborhood operation
replicates edge pixels at the border.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError, DegenerateInputError, ParameterError

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

LEGAL_LABELS = (0, 1, 2, 3, 255)


def as_image(data, clamp: bool = False) -> np.ndarray:
    """Validate ``data`` as an image and return it as a float64 array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ParameterError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    if clamp:
        return np.clip(img, 0.0, 1.0)
    return img


def as_labels(data) -> np.ndarray:
    labels = np.asarray(data)
    if labels.ndim != 2:
        raise ParameterError(f"expected a 2-D label map, got shape {labels.shape}")
    if not np.isin(labels, LEGAL_LABELS).all():
        bad = np.setdiff1d(np.unique(labels), LEGAL_LABELS)
        raise ParameterError(f"label map holds illegal values {bad.tolist()}")
    return labels.astype(np.uint8, copy=False)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class StructuringElement:
    """Neighborhood for morphology, as (row, col) offsets around the origin."""

    offsets: tuple

    def __post_init__(self):
        offsets = tuple((int(di), int(dj)) for di, dj in self.offsets)
        if not offsets:
            raise ParameterError("structuring element must be nonempty")
        if (0, 0) not in offsets:
            raise ParameterError("structuring element must contain the origin")
        object.__setattr__(self, "offsets", tuple(sorted(set(offsets))))

    @classmethod
    def square(cls, size: int = 3) -> "StructuringElement":
        if size < 1 or size % 2 == 0:
            raise ParameterError("square size must be a positive odd integer")
        h = size // 2
        return cls(tuple((i, j) for i in range(-h, h + 1) for j in range(-h, h + 1)))

    @classmethod
    def disk(cls, radius: int) -> "StructuringElement":
        if radius < 0:
            raise ParameterError("disk radius must be >= 0")
        r = int(radius)
        return cls(
            tuple(
                (i, j)
                for i in range(-r, r + 1)
                for j in range(-r, r + 1)
                if i * i + j * j <= r * r
            )
        )

    @property
    def reach(self) -> int:
        return max(max(abs(di), abs(dj)) for di, dj in self.offsets)

    def footprint(self) -> np.ndarray:
        r = self.reach
        fp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
        for di, dj in self.offsets:
            fp[di + r, dj + r] = True
        return fp


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    """Sampled Gaussian on ``[-radius, radius]``, normalized to unit sum."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if int(radius) != radius or radius < 1:
        raise ParameterError(f"radius must be an integer >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate_rows(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    padded = np.pad(img, ((0, 0), (r, r)), mode="edge")
    w = img.shape[1]
    out = np.zeros_like(img)
    for t, kv in enumerate(k):
        out += kv * padded[:, t : t + w]
    return out


def gaussian_smooth(img, sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    img = as_image(img)
    k = gaussian_kernel1d(sigma, radius)
    out = _correlate_rows(img, k)
    out = _correlate_rows(out.T, k).T
    # unit-sum nonnegative kernel: keep the result inside the input range exactly
    return np.clip(out, img.min(), img.max())


def sobel_components(img) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses (correlation, edge replication)."""
    img = as_image(img)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ParameterError(f"Sobel needs an image of at least 3x3, got {w}x{h}")
    p = np.pad(img, 1, mode="edge")

    def side(kernel, sign):
        acc = np.zeros_like(img)
        for i, j in zip(*np.nonzero(np.sign(kernel) == sign)):
            acc += abs(kernel[i, j]) * p[i : i + h, j : j + w]
        return acc

    # positive minus negative taps, so flat regions give exactly zero
    gx = side(SOBEL_X, 1) - side(SOBEL_X, -1)
    gy = side(SOBEL_Y, 1) - side(SOBEL_Y, -1)
    return gx, gy


def sobel_gradient_magnitude(img) -> np.ndarray:
    gx, gy = sobel_components(img)
    return np.sqrt(gx * gx + gy * gy)


def erode(field, b: StructuringElement | None = None) -> np.ndarray:
    """Grayscale erosion: ``out[y, x] = min over (di, dj) in b of field[y - di, x - dj]``."""
    field = np.asarray(field, dtype=np.float64)
    b = b or StructuringElement.square(3)
    r = b.reach
    h, w = field.shape
    p = np.pad(field, r, mode="edge")
    out = np.full_like(field, np.inf)
    for di, dj in b.offsets:
        np.minimum(out, p[r - di : r - di + h, r - dj : r - dj + w], out=out)
    return out


def dilate(field, b: StructuringElement | None = None) -> np.ndarray:
    """Grayscale dilation, the max counterpart of :func:`erode`."""
    field = np.asarray(field, dtype=np.float64)
    b = b or StructuringElement.square(3)
    r = b.reach
    h, w = field.shape
    p = np.pad(field, r, mode="edge")
    out = np.full_like(field, -np.inf)
    for di, dj in b.offsets:
        np.maximum(out, p[r + di : r + di + h, r + dj : r + dj + w], out=out)
    return out


def otsu_threshold(field, bins: int = 256) -> float:
    """Histogram bin edge maximizing the between-class variance.

    Values ``>= threshold`` form the upper class. The variance is evaluated on
    bin indices, which ranks candidates identically to bin centers because
    centers are an affine function of the index.
    """
    if bins < 2:
        raise ParameterError("bins must be >= 2")
    values = np.asarray(field, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if not hi > lo:
        raise DegenerateInputError("cannot threshold a constant field")
    if not np.all(np.diff(np.linspace(lo, hi, bins + 1)) > 0):
        raise DegenerateInputError(f"value range {hi - lo:g} too narrow for {bins} bins")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    counts = counts.astype(np.int64)
    idx = np.arange(bins, dtype=np.int64)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * idx)[:-1]
    n1 = counts.sum() - n0
    s1 = (counts * idx).sum() - s0
    valid = (n0 > 0) & (n1 > 0)
    # (mu0 - mu1)^2 * n0 * n1 / N^2 reduces to (n0*s1 - n1*s0)^2 / (n0*n1) up to a constant
    num = (n0 * s1 - n1 * s0).astype(np.float64) ** 2
    den = np.where(valid, n0 * n1, 1).astype(np.float64)
    score = np.where(valid, num / den, -1.0)
    k = int(np.argmax(score))
    return float(edges[k + 1])


def local_mean_threshold(field, window: int = 15, offset: float | None = None) -> np.ndarray:
    """Adaptive mask: pixels exceeding their local window mean plus ``offset``.

    ``offset`` defaults to half the global standard deviation of the field.
    """
    from scipy.ndimage import uniform_filter

    if window < 3 or window % 2 == 0:
        raise ParameterError("window must be an odd integer >= 3")
    field = np.asarray(field, dtype=np.float64)
    if not field.max() > field.min():
        raise DegenerateInputError("cannot threshold a constant field")
    if offset is None:
        offset = 0.5 * float(field.std())
    local = uniform_filter(field, size=window, mode="nearest")
    return field > local + offset


def background_stats(img, fg) -> tuple[float, float]:
    """Population mean and standard deviation over pixels where ``fg`` is False."""
    img = as_image(img)
    fg = np.asarray(fg, dtype=bool)
    _check_same_shape(img, fg)
    bg = img[~fg]
    if bg.size < 2:
        raise DegenerateInputError(f"need at least 2 background pixels, got {bg.size}")
    return float(bg.mean()), float(bg.std())


# --- file I/O -----------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read a single-channel 8- or 16-bit PNG into ``[0, 1]`` floats."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.dtype(">u2"), np.dtype("<u2")):
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if arr.dtype == bool:
        return arr.astype(np.float64)
    raise DataError(f"{path}: unsupported pixel type {arr.dtype}")


def save_image(path, img, bit_depth: int = 16) -> None:
    img = as_image(img, clamp=True)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if bit_depth == 16:
        arr = np.round(img * 65535.0).astype(np.uint16)
    elif bit_depth == 8:
        arr = np.round(img * 255.0).astype(np.uint8)
    else:
        raise ParameterError("bit_depth must be 8 or 16")
    PILImage.fromarray(arr).save(path)


def load_labels(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc
    try:
        return as_labels(arr)
    except ParameterError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_labels(path, labels) -> None:
    labels = as_labels(labels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(labels).save(path)
