"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..dataio import AugmentConfig
from ..errors import ConfigError
from ..model import Switches
from ..nets import NetConfig
from ..objectives import LossWeights
from ..synthgen import SynthSpec


@dataclass
class TrainConfig:
    # optimisation
    base_lr: float = 1e-3
    power: float = 0.9
    total_epochs: int = 30
    batch_size: int = 16
    image_size: int = 64
    folds: int = 5
    seed: int = 0
    deterministic: bool = False
    group_by_patient: bool = False
    # network
    backbone: str = "tiny"
    latent_tap: str = "bottleneck"
    sle_embed_variant: str = "channels"
    weights_path: str = ""
    # module switches
    cre: bool = True
    sle: bool = True
    fpd: bool = True
    # objectives
    alpha: float = 0.1
    beta: float = 0.1
    eps_smooth: float = 0.1
    smooth_prior: str = "empirical"
    dice_smooth: float = 1.0
    balanced_pairs: bool = False
    fpd_literal_similarity: bool = False
    # evaluation
    average: str = "macro"
    # augmentation
    augment: bool = True
    aug_jitter_p: float = 0.8
    aug_brightness: float = 0.2
    aug_contrast: float = 0.2
    aug_grayscale_p: float = 0.2
    aug_blur_p: float = 0.3
    aug_flip_p: float = 0.5
    # synthetic data (used by `synth` when given a config file)
    synth_n_per_class: int = 100
    synth_image_size: int = 64
    synth_seed: int = 0
    synth_mode: str = "full"
    synth_distractor_density: float = 0.3
    synth_noise_sigma: float = 0.04

    def __post_init__(self):
        for name in ("base_lr", "total_epochs", "batch_size", "image_size", "power"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm and pairing need two samples)")
        LossWeights(self.alpha, self.beta)

    def net_config(self, seed: int | None = None) -> NetConfig:
        return NetConfig(
            backbone=self.backbone, input_size=self.image_size,
            seed=self.seed if seed is None else seed,
            latent_tap=self.latent_tap, sle_embed_variant=self.sle_embed_variant,
            weights_path=self.weights_path or None,
        )

    def switches(self) -> Switches:
        return Switches(cre=self.cre, sle=self.sle, fpd=self.fpd)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def augment_config(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(
            jitter_p=self.aug_jitter_p, brightness=self.aug_brightness, contrast=self.aug_contrast,
            grayscale_p=self.aug_grayscale_p, blur_p=self.aug_blur_p, flip_p=self.aug_flip_p,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_per_class=self.synth_n_per_class, image_size=self.synth_image_size, seed=self.synth_seed,
            mode=self.synth_mode, distractor_density=self.synth_distractor_density,
            noise_sigma=self.synth_noise_sigma,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc


_FIELD_TYPES = {f.name: {"bool": bool, "int": int, "float": float, "str": str}[f.type] for f in fields(TrainConfig)}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _coerce(key, _FIELD_TYPES[key], raw)
    return (base or TrainConfig()).replace(**values)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)


def dump_config_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
