"""Artificial mixtures of homogeneous populations.

Two crops are drawn from records of different classes, each is normalized so
its background matches a shared target mean and standard deviation, and the
pair is blended as ``lam * I1 + (1 - lam) * I2``. Label maps combine as
``M2 + (1 - sign(M2)) * M1``: the second map wins wherever it is foreground.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import IGNORE_INDEX, provenance
from .errors import DegenerateInputError, ParameterError
from .imaging import as_image, as_labels, background_stats, load_image, load_labels, save_image, save_labels
from .manifest import DatasetManifest, Record

log = logging.getLogger(__name__)

CLAMP_REPORT_FRACTION = 0.001


@dataclass
class MixerConfig:
    lam: float = 0.5
    crop_size: int = 128
    target_bg_mean: float = 0.5
    target_bg_std: float = 0.05
    seed: int = 0
    pairs_per_epoch: int = 1000
    allow_same_class: bool = False

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ParameterError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.crop_size < 8:
            raise ParameterError("crop_size must be >= 8")
        if not 0 < self.target_bg_mean < 1:
            raise ParameterError("target_bg_mean must lie in (0, 1)")
        if self.target_bg_std < 0:
            raise ParameterError("target_bg_std must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class MixedSample:
    image: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)


def normalize_background(img, labels, target_mean: float, target_std: float, clamp: bool = True) -> np.ndarray:
    """Affine-map ``img`` so its background (label 0) has the target statistics."""
    img = as_image(img)
    labels = as_labels(labels)
    mu, sigma = background_stats(img, labels != 0)
    if target_std > 0 and sigma <= 1e-8:
        raise DegenerateInputError("background has zero variance; cannot rescale")
    scale = target_std / sigma if target_std > 0 else 0.0
    out = (img - mu) * scale + target_mean
    return np.clip(out, 0.0, 1.0) if clamp else out


def mix_images(i1, i2, lam: float = 0.5, clamp: bool = True) -> np.ndarray:
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape:
        raise ParameterError(f"shape mismatch: {i1.shape} vs {i2.shape}")
    if not 0 < lam <= 1:
        raise ParameterError(f"lambda must lie in (0, 1], got {lam}")
    out = lam * i1 + (1.0 - lam) * i2
    return np.clip(out, 0.0, 1.0) if clamp else out


def mix_labels(m1, m2) -> np.ndarray:
    m1 = np.asarray(m1)
    m2 = np.asarray(m2)
    if m1.shape != m2.shape:
        raise ParameterError(f"shape mismatch: {m1.shape} vs {m2.shape}")
    if (m1 == IGNORE_INDEX).any() or (m2 == IGNORE_INDEX).any():
        raise ParameterError("ignore labels cannot be mixed")
    m1 = m1.astype(np.int64)
    m2 = m2.astype(np.int64)
    return (m2 + (1 - np.sign(m2)) * m1).astype(np.uint8)


class SamplePool:
    """In-memory homogeneous images with label maps, ready for cropping.

    Each image is background-normalized once on load, using the statistics of
    the whole frame rather than of an individual crop.
    """

    def __init__(self, images, labels, classes, ids=None, target_bg_mean=0.5, target_bg_std=0.05):
        if not (len(images) == len(labels) == len(classes)):
            raise ParameterError("images, labels and classes must have equal length")
        if not images:
            raise ParameterError("sample pool is empty")
        self.labels = [as_labels(m) for m in labels]
        self.classes = [int(c) for c in classes]
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
        self.images = [
            normalize_background(img, m, target_bg_mean, target_bg_std) for img, m in zip(images, self.labels)
        ]
        for img, m in zip(self.images, self.labels):
            if img.shape != m.shape:
                raise ParameterError("image and label map shapes differ")

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, target_bg_mean=0.5, target_bg_std=0.05, split=None):
        images, labels, classes, ids = [], [], [], []
        for r in manifest.records:
            if split is not None and r.split != split:
                continue
            if r.labels is None or r.cls is None:
                raise ParameterError(f"pool record {r.image} needs both a label map and a class")
            images.append(load_image(manifest.resolve(r.image)))
            labels.append(load_labels(manifest.resolve(r.labels)))
            classes.append(r.cls)
            ids.append(r.image)
        return cls(images, labels, classes, ids, target_bg_mean, target_bg_std)

    def random_crop(self, index: int, size: int, rng: np.random.Generator):
        img = self.images[index]
        h, w = img.shape
        if h < size or w < size:
            raise ParameterError(f"image {self.ids[index]} ({w}x{h}) is smaller than crop size {size}")
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        return img[y : y + size, x : x + size], self.labels[index][y : y + size, x : x + size], (y, x)

    def draw_pair(self, rng: np.random.Generator, allow_same_class: bool = False) -> tuple[int, int]:
        """Uniform over ordered record pairs (distinct records, distinct classes unless allowed)."""
        n = len(self)
        classes = np.asarray(self.classes)
        if allow_same_class:
            if n < 2:
                raise ParameterError("need at least 2 records to draw a pair")
            i = int(rng.integers(n))
            j = int(rng.integers(n - 1))
            return i, j + (j >= i)
        counts = {c: int((classes == c).sum()) for c in np.unique(classes)}
        partners = np.array([n - counts[c] for c in classes], dtype=np.float64)
        if partners.sum() == 0:
            raise ParameterError("pool needs records from at least two classes")
        i = int(rng.choice(n, p=partners / partners.sum()))
        others = np.flatnonzero(classes != classes[i])
        j = int(others[rng.integers(len(others))])
        return i, j


def sample_mixed_crop(pool: SamplePool, cfg: MixerConfig, rng: np.random.Generator) -> MixedSample:
    i, j = pool.draw_pair(rng, cfg.allow_same_class)
    c1, m1, off1 = pool.random_crop(i, cfg.crop_size, rng)
    c2, m2, off2 = pool.random_crop(j, cfg.crop_size, rng)
    raw = mix_images(c1, c2, cfg.lam, clamp=False)
    image = np.clip(raw, 0.0, 1.0)
    prov = {
        "sources": [pool.ids[i], pool.ids[j]],
        "offsets": [list(off1), list(off2)],
        "lambda": cfg.lam,
    }
    clamped = float(np.mean((raw < 0) | (raw > 1)))
    if clamped > CLAMP_REPORT_FRACTION:
        prov["clamped_fraction"] = clamped
    return MixedSample(image, mix_labels(m1, m2), prov)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample RNG stream, independent of scheduling."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x6D6978, int(index)])


def synthesize_set(pool: SamplePool, cfg: MixerConfig, n: int, out_dir, workers: int = 1) -> DatasetManifest:
    """Write ``n`` mixed samples (image + label PNG) and a manifest describing them."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    def work(k):
        s = sample_mixed_crop(pool, cfg, sample_rng(cfg.seed, k))
        img_name = f"images/mix_{k:05d}.png"
        lab_name = f"labels/mix_{k:05d}.png"
        save_image(out_dir / img_name, s.image)
        save_labels(out_dir / lab_name, s.labels)
        return Record(img_name, lab_name, None, "train"), s.provenance

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(work, range(n)))
    else:
        results = [work(k) for k in range(n)]

    manifest = DatasetManifest([r for r, _ in results], out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    with (out_dir / "mix_provenance.jsonl").open("w") as f:
        for k, (_, prov) in enumerate(results):
            f.write(json.dumps({"index": k, **prov}) + "\n")
    names = [r.image for r, _ in results] + [r.labels for r, _ in results]
    provenance.record(out_dir, names + ["manifest.jsonl"], cfg.to_dict(), cfg.seed)
    log.info("wrote %d mixed samples to %s", n, out_dir)
    return manifest
