"""Pipeline configuration: nested module configs plus one global seed."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ParameterError
from .foreground import ExtractionConfig
from .mixer import MixerConfig
from .phantom import PhantomConfig
from .segmenter import TrainConfig


@dataclass
class EvalConfig:
    window: int = 128
    stride: int = 64
    convention: str = "recall"
    per_image: bool = False
    test_unmixed_per_class: int = 30
    test_true_mixture: int = 50
    test_artificial: int = 30
    mixture: str = "1:0.3333333333,2:0.3333333333,3:0.3333333334"
    overlays: int = 4

    def __post_init__(self):
        if self.window < 3 or not 1 <= self.stride <= self.window:
            raise ParameterError("need window >= 3 and 1 <= stride <= window")
        if self.convention not in ("recall", "precision"):
            raise ParameterError(f"unknown accuracy convention {self.convention!r}")


@dataclass
class DataConfig:
    train_per_class: int = 20
    val_fraction: float = 0.10
    manifest: str | None = None  # user-supplied homogeneous manifest instead of phantoms

    def __post_init__(self):
        if self.train_per_class < 2:
            raise ParameterError("train_per_class must be >= 2")
        if not 0 <= self.val_fraction < 1:
            raise ParameterError("val_fraction must lie in [0, 1)")


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit module seed from the global seed and a module name."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _desk_train() -> TrainConfig:
    return TrainConfig(
        learning_rate=0.1,
        momentum=0.9,
        iterations=1000,
        crops_per_iter=6,
        batch_pixels=4096,
        crop_size=128,
        radii=(1, 2, 4, 8, 16, 32),
        noise_sigma=(0.0, 0.05),
        contrast_factor=(0.7, 1.6),
    )


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    mixer: MixerConfig = field(default_factory=MixerConfig)
    train: TrainConfig = field(default_factory=_desk_train)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")
        if self.phantom.image_size < self.mixer.crop_size or self.phantom.image_size < self.train.crop_size:
            raise ParameterError("phantom images must be at least as large as the crop size")
        if self.eval.window > self.phantom.image_size:
            raise ParameterError("inference window exceeds the phantom image size")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "workers": self.workers,
            "phantom": self.phantom.to_dict(),
            "extraction": self.extraction.to_dict(),
            "mixer": self.mixer.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "data": asdict(self.data),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        try:
            kwargs = {k: d[k] for k in ("seed", "workers") if k in d}
            if "phantom" in d:
                kwargs["phantom"] = PhantomConfig.from_dict(d["phantom"])
            if "extraction" in d:
                kwargs["extraction"] = ExtractionConfig(**d["extraction"])
            if "mixer" in d:
                kwargs["mixer"] = MixerConfig.from_dict(d["mixer"])
            if "train" in d:
                kwargs["train"] = TrainConfig(**{**_desk_train().to_dict(), **d["train"]})
            if "eval" in d:
                kwargs["eval"] = EvalConfig(**d["eval"])
            if "data" in d:
                kwargs["data"] = DataConfig(**d["data"])
        except TypeError as exc:
            raise ParameterError(f"invalid config: {exc}") from exc
        return cls(**kwargs)


def load_config_file(path) -> dict:
    """Read a JSON or YAML config file into a plain dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    if path.suffix in (".yaml", ".yml"):
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ParameterError(f"invalid YAML in {path}: {exc}") from exc
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"invalid JSON in {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParameterError(f"config {path} must hold a mapping")
    return data
