"""Per-pixel multinomial logistic segmenter trained with SGD on Tversky loss.

The model sees each pixel through a fixed set of local features (intensity,
box-window mean and standard deviation at several radii, Sobel magnitude),
standardized with statistics frozen at the start of training. Scores are a
linear function of the standardized features; probabilities are their
softmax over background plus the three cell classes.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import IGNORE_INDEX
from .errors import DataError, DegenerateInputError, ParameterError, TrainingError
from .imaging import as_image, as_labels, gaussian_smooth, sobel_gradient_magnitude

log = logging.getLogger(__name__)

MODEL_FORMAT = "cellmixer-pixel-classifier"
MODEL_VERSION = 1
N_CLASSES = 3


# --- features -------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    radii: tuple = (1, 2, 4, 8, 16, 32)
    sobel: bool = True

    @property
    def names(self) -> list[str]:
        names = ["intensity"]
        for r in self.radii:
            names += [f"mean_r{r}", f"std_r{r}"]
        if self.sobel:
            names.append("sobel")
        return names

    @property
    def n_features(self) -> int:
        return len(self.names)

    @property
    def reach(self) -> int:
        """How far (in pixels) a feature looks from its center pixel."""
        return max([*self.radii, 1 if self.sobel else 0])


def featurize(img, spec: FeatureSpec) -> np.ndarray:
    """Per-pixel features, shape ``(H, W, n_features)``; borders replicate edges."""
    img = as_image(img)
    feats = [img]
    sq = img * img
    for r in spec.radii:
        size = 2 * r + 1
        m = uniform_filter(img, size=size, mode="nearest")
        m2 = uniform_filter(sq, size=size, mode="nearest")
        feats.append(m)
        feats.append(np.sqrt(np.maximum(m2 - m * m, 0.0)))
    if spec.sobel:
        feats.append(sobel_gradient_magnitude(img))
    return np.stack(feats, axis=-1)


# --- model ----------------------------------------------------------------------


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PixelClassifier:
    feature_spec: FeatureSpec
    weights: np.ndarray  # (n_classes + 1, n_features + 1); last column is the bias
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    n_classes: int = N_CLASSES
    input_normalization: dict | None = None

    @classmethod
    def zeros(cls, spec: FeatureSpec, mean=None, scale=None, n_classes: int = N_CLASSES) -> "PixelClassifier":
        f = spec.n_features
        return cls(
            spec,
            np.zeros((n_classes + 1, f + 1)),
            np.zeros(f) if mean is None else np.asarray(mean, dtype=np.float64),
            np.ones(f) if scale is None else np.asarray(scale, dtype=np.float64),
            n_classes,
        )

    def design(self, feats: np.ndarray) -> np.ndarray:
        """Standardized features with a trailing constant column."""
        x = (feats - self.feature_mean) / self.feature_scale
        return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)

    def scores(self, feats: np.ndarray) -> np.ndarray:
        return self.design(feats) @ self.weights.T

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "n_classes": self.n_classes,
            "feature_spec": {"radii": list(self.feature_spec.radii), "sobel": self.feature_spec.sobel},
            "weight_shape": list(self.weights.shape),
            "weights": self.weights.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "input_normalization": self.input_normalization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PixelClassifier":
        if d.get("format") != MODEL_FORMAT:
            raise DataError(f"not a pixel-classifier file (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model version {d.get('version')}")
        spec = FeatureSpec(tuple(d["feature_spec"]["radii"]), bool(d["feature_spec"]["sobel"]))
        w = np.asarray(d["weights"], dtype=np.float64)
        expected = (d["n_classes"] + 1, spec.n_features + 1)
        if w.shape != expected or list(w.shape) != d["weight_shape"]:
            raise DataError(f"weight matrix has shape {w.shape}, expected {expected}")
        if not np.all(np.isfinite(w)):
            raise DataError("model weights are not finite")
        return cls(
            spec,
            w,
            np.asarray(d["feature_mean"], dtype=np.float64),
            np.asarray(d["feature_scale"], dtype=np.float64),
            int(d["n_classes"]),
            d.get("input_normalization"),
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "PixelClassifier":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"cannot load model {path}: {exc}") from exc


def forward(model: PixelClassifier, img) -> np.ndarray:
    """Probability map of shape ``(H, W, n_classes + 1)``."""
    return softmax(model.scores(featurize(img, model.feature_spec)))


# --- loss -----------------------------------------------------------------------


def tversky_loss(pred, target, alpha: float = 0.7, beta: float = 0.3, smooth: float = 1.0):
    """Soft Tversky loss averaged over all classes (background included).

    ``pred`` holds probabilities with classes on the last axis; ``target``
    holds class indices with the same leading shape. Pixels labeled 255 are
    left out of every sum. Returns ``(loss, grad)`` where ``grad`` is the
    gradient with respect to the pre-softmax scores, shaped like ``pred``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape[:-1] != target.shape:
        raise ParameterError(f"prediction {pred.shape} and target {target.shape} disagree")
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ParameterError("alpha and beta must be >= 0 with a positive sum")
    k = pred.shape[-1]
    p = pred.reshape(-1, k)
    t_idx = target.reshape(-1)
    keep = t_idx != IGNORE_INDEX
    if not keep.any():
        raise DegenerateInputError("target has no annotated pixels")
    pk = p[keep]
    t = np.zeros_like(pk)
    t[np.arange(len(pk)), t_idx[keep].astype(np.int64)] = 1.0

    tp = (pk * t).sum(axis=0)
    fn = ((1.0 - pk) * t).sum(axis=0)
    fp = (pk * (1.0 - t)).sum(axis=0)
    num = tp + smooth
    den = tp + alpha * fn + beta * fp + smooth
    ti = num / den
    loss = float(np.mean(1.0 - ti))

    # d TI_c / d p_ic, then through the softmax
    dden = t * (1.0 - alpha) + (1.0 - t) * beta
    dti = (t * den - num * dden) / (den * den)
    dp = -dti / k
    ds = pk * (dp - (dp * pk).sum(axis=1, keepdims=True))
    grad = np.zeros_like(p)
    grad[keep] = ds
    return loss, grad.reshape(pred.shape)


# --- augmentation ---------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0
    momentum: float = 0.0
    iterations: int = 2000
    batch_pixels: int = 4096
    crops_per_iter: int = 2
    crop_size: int = 128
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    tversky_smooth: float = 1.0
    seed: int = 0
    radii: tuple = (1, 2, 4, 8, 16)
    stats_crops: int = 16
    aug_prob: float = 0.5
    flip: bool = True
    blur: bool = True
    blur_sigma: tuple = (0.3, 1.0)
    noise: bool = True
    noise_sigma: tuple = (0.0, 0.03)
    brightness_contrast: bool = True
    brightness_delta: tuple = (-0.1, 0.1)
    contrast_factor: tuple = (0.8, 1.25)
    log_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ParameterError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.tversky_alpha < 0 or self.tversky_beta < 0 or self.tversky_alpha + self.tversky_beta <= 0:
            raise ParameterError("tversky alpha and beta must be >= 0 with a positive sum")
        if self.iterations < 0 or self.batch_pixels < 1 or self.crops_per_iter < 1:
            raise ParameterError("iterations, batch_pixels and crops_per_iter must be positive")
        self.radii = tuple(int(r) for r in self.radii)
        for name in ("blur_sigma", "noise_sigma", "brightness_delta", "contrast_factor"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale_preset(cls, **overrides) -> "TrainConfig":
        """Full-scale schedule: 20k iterations, crops of 518, 16 crops per batch."""
        base = dict(iterations=20000, crop_size=518, crops_per_iter=16, batch_pixels=16 * 4096)
        base.update(overrides)
        return cls(**base)


def augment(img, labels, cfg: TrainConfig, rng: np.random.Generator):
    """Random flips (image and labels), blur, noise and brightness/contrast (image only)."""
    img = as_image(img)
    labels = np.asarray(labels)
    if img.shape != labels.shape:
        raise ParameterError(f"image {img.shape} and labels {labels.shape} disagree")
    p = cfg.aug_prob
    if cfg.flip:
        if rng.random() < p:
            img, labels = img[:, ::-1], labels[:, ::-1]
        if rng.random() < p:
            img, labels = img[::-1, :], labels[::-1, :]
    if cfg.blur and rng.random() < p:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = gaussian_smooth(img, sigma, max(1, int(np.ceil(2 * sigma))))
    if cfg.noise and rng.random() < p:
        sigma = rng.uniform(*cfg.noise_sigma)
        img = np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)
    if cfg.brightness_contrast and rng.random() < p:
        delta = rng.uniform(*cfg.brightness_delta)
        factor = rng.uniform(*cfg.contrast_factor)
        m = img.mean()
        img = np.clip((img - m) * factor + m + delta, 0.0, 1.0)
    return np.ascontiguousarray(img), np.ascontiguousarray(labels)


# --- training -------------------------------------------------------------------


class CropSource:
    """Where training crops come from: homogeneous records or mixed composites."""

    def __init__(self, pool, mode: str, crop_size: int, mixer_cfg=None):
        from .mixer import MixerConfig

        if mode not in ("baseline", "cellmixer"):
            raise ParameterError(f"mode must be 'baseline' or 'cellmixer', got {mode!r}")
        if len(pool) == 0:
            raise ParameterError("training pool is empty")
        self.pool = pool
        self.mode = mode
        self.crop_size = crop_size
        self.mixer_cfg = mixer_cfg or MixerConfig(crop_size=crop_size)
        if self.mixer_cfg.crop_size != crop_size:
            self.mixer_cfg = MixerConfig(**{**asdict(self.mixer_cfg), "crop_size": crop_size})

    def draw(self, rng: np.random.Generator):
        from .mixer import sample_mixed_crop

        if self.mode == "cellmixer":
            s = sample_mixed_crop(self.pool, self.mixer_cfg, rng)
            return s.image, s.labels
        i = int(rng.integers(len(self.pool)))
        img, labels, _ = self.pool.random_crop(i, self.crop_size, rng)
        return img, labels


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys])


def _prepare_crop(source: CropSource, cfg: TrainConfig, spec: FeatureSpec, it: int, k: int):
    rng = _stream(cfg.seed, 2, it, k)
    img, labels = source.draw(rng)
    img, labels = augment(img, labels, cfg, rng)
    feats = featurize(img, spec).reshape(-1, spec.n_features)
    labels = labels.reshape(-1)
    valid = np.flatnonzero(labels != IGNORE_INDEX)
    per_crop = max(1, cfg.batch_pixels // cfg.crops_per_iter)
    pick = valid[rng.choice(len(valid), size=min(per_crop, len(valid)), replace=False)] if len(valid) else valid
    return feats[pick], labels[pick]


@dataclass
class TrainResult:
    model: PixelClassifier
    loss_trace: list = field(default_factory=list)


def feature_statistics(source: CropSource, cfg: TrainConfig, spec: FeatureSpec):
    feats = []
    for k in range(cfg.stats_crops):
        rng = _stream(cfg.seed, 1, k)
        img, _ = source.draw(rng)
        feats.append(featurize(img, spec).reshape(-1, spec.n_features))
    allf = np.concatenate(feats)
    scale = allf.std(axis=0)
    return allf.mean(axis=0), np.where(scale > 1e-12, scale, 1.0)


def input_normalization_for(source: CropSource) -> dict:
    """Background target that gives inference images the cell contrast seen in training.

    Pool images are normalized to the canonical background statistics. A
    composite carries a source cell at weight ``lam`` or ``1 - lam``; either
    slot is equally likely, so cells appear on average at half their
    normalized contrast whatever ``lam`` is. Inference images are scaled
    down by the same factor.
    """
    mcfg = source.mixer_cfg
    contrast = 1.0 if source.mode == "baseline" else 0.5
    return {
        "target_mean": mcfg.target_bg_mean,
        "target_std": mcfg.target_bg_std * contrast,
        "contrast_scale": contrast,
    }


def train(pool, cfg: TrainConfig, mode: str = "cellmixer", mixer_cfg=None, workers: int = 1) -> TrainResult:
    """Fit a :class:`PixelClassifier` by minibatch SGD on the Tversky loss.

    ``mode='baseline'`` trains on homogeneous crops, ``mode='cellmixer'`` on
    mixed composites drawn on the fly. Every iteration draws its crops from
    an RNG stream keyed by (seed, iteration, crop), so the loss trace does not
    depend on ``workers``.
    """
    spec = FeatureSpec(cfg.radii)
    source = CropSource(pool, mode, cfg.crop_size, mixer_cfg)
    mean, scale = feature_statistics(source, cfg, spec)
    model = PixelClassifier.zeros(spec, mean, scale)
    model.input_normalization = input_normalization_for(source)
    velocity = np.zeros_like(model.weights)
    trace = []
    ex = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for it in range(cfg.iterations):
            jobs = [(source, cfg, spec, it, k) for k in range(cfg.crops_per_iter)]
            parts = list(ex.map(lambda a: _prepare_crop(*a), jobs)) if ex else [_prepare_crop(*a) for a in jobs]
            feats = np.concatenate([f for f, _ in parts])
            labels = np.concatenate([t for _, t in parts])
            if len(labels) == 0:
                continue
            x = model.design(feats)
            probs = softmax(x @ model.weights.T)
            loss, gscores = tversky_loss(probs, labels, cfg.tversky_alpha, cfg.tversky_beta, cfg.tversky_smooth)
            grad = gscores.T @ x + cfg.weight_decay * model.weights
            velocity = cfg.momentum * velocity + grad
            model.weights = model.weights - cfg.learning_rate * velocity
            if not (np.isfinite(loss) and np.all(np.isfinite(model.weights))):
                raise TrainingError(f"training diverged at iteration {it}", iteration=it)
            trace.append(loss)
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                log.info("%s iteration %d/%d loss %.4f", mode, it + 1, cfg.iterations, np.mean(trace[-cfg.log_every:]))
    finally:
        if ex:
            ex.shutdown()
    return TrainResult(model, trace)


# --- inference ------------------------------------------------------------------


def _positions(length: int, window: int, stride: int) -> list[int]:
    pos = list(range(0, length - window + 1, stride))
    if pos[-1] != length - window:
        pos.append(length - window)
    return pos


def sliding_window_probs(model: PixelClassifier, img, window: int, stride: int) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape
    if window < 3 or window > min(h, w):
        raise ParameterError(f"window {window} must lie in [3, min(image dims)={min(h, w)}]")
    if not 1 <= stride <= window:
        raise ParameterError(f"stride {stride} must lie in [1, window]")
    acc = np.zeros((h, w, model.n_classes + 1))
    cover = np.zeros((h, w, 1))
    for y in _positions(h, window, stride):
        for x in _positions(w, window, stride):
            acc[y : y + window, x : x + window] += forward(model, img[y : y + window, x : x + window])
            cover[y : y + window, x : x + window] += 1
    return acc / cover


def sliding_window_infer(model: PixelClassifier, img, window: int, stride: int) -> np.ndarray:
    """Label map from window-averaged probabilities; ties go to the lower class index."""
    probs = sliding_window_probs(model, img, window, stride)
    return np.argmax(probs, axis=-1).astype(np.uint8)


def prepare_input(model: PixelClassifier, img) -> np.ndarray:
    """Apply the model's input normalization (if any) to a raw image.

    With background normalization the background is found by unsupervised
    foreground extraction, so no annotation is needed at inference time.
    """
    img = as_image(img)
    norm = model.input_normalization
    if not norm:
        return img
    from .foreground import ExtractionConfig, assign_label, extract_foreground
    from .mixer import normalize_background

    fg = extract_foreground(img, ExtractionConfig(**norm.get("extraction", {})))
    return normalize_background(img, assign_label(fg, 1), norm["target_mean"], norm["target_std"])


def predict_image(model: PixelClassifier, img, window: int, stride: int) -> np.ndarray:
    img = prepare_input(model, img)
    window = min(window, *img.shape)
    return sliding_window_infer(model, img, window, min(stride, window))
