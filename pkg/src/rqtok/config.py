"""Run configuration: defaults, presets, validation, YAML round-trip."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Union

import yaml

from .quantizer import NORMALIZATION_MODES


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # codebook training
    gamma: float = 0.99
    epsilon: float = 1e-5
    reset_threshold: float = 1
    init_mode: str = "kmeans"
    kmeans_steps: int = 10
    # quantizer shape
    num_codebooks: int = 4
    codebook_size: int = 16
    dim: int = 8
    normalization: str = "input_only"
    soft_k: int = 1
    # losses
    beta: float = 0.25
    lambda_cos: float = 1.0
    alpha: float = 0.5
    # schedule
    iterations: int = 2
    encoder_epochs: int = 30
    tokenizer_epochs: int = 10
    encoder_lr: float = 0.5
    tokenizer_lr: float = 0.1
    batch_size: int = 16
    mask_ratio: float = 0.8
    joint_mode: bool = False
    tokenizer_update_every: Optional[int] = 5
    # synthetic data
    n_samples: int = 256
    seq_len: int = 32
    feature_dim: int = 16
    n_coarse: int = 4
    n_fine: int = 4
    coarse_scale: float = 1.0
    fine_scale: float = 1.0
    noise: float = 0.05
    eval_samples: int = 64
    # misc
    seed: int = 0
    float_width: int = 64

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    @property
    def sizes(self) -> list:
        return [self.codebook_size] * self.num_codebooks

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk-rq": {},
    "desk-vq": {"num_codebooks": 1, "codebook_size": 64},
    "full-rq": {"num_codebooks": 4, "codebook_size": 256, "dim": 256, "gamma": 0.99,
                "reset_threshold": 1},
    "full-vq": {"num_codebooks": 1, "codebook_size": 1024, "dim": 256, "gamma": 0.99,
                "reset_threshold": 1},
}

_CHOICES = {
    "init_mode": ("kmeans", "uniform"),
    "normalization": NORMALIZATION_MODES,
    "float_width": (32, 64),
}
_POSITIVE_INT = ("num_codebooks", "codebook_size", "dim", "iterations", "batch_size",
                 "n_samples", "seq_len", "feature_dim", "n_coarse", "n_fine", "eval_samples",
                 "soft_k")
_NONNEG_INT = ("kmeans_steps", "encoder_epochs", "tokenizer_epochs", "seed")
_NONNEG_FLOAT = ("beta", "lambda_cos", "alpha", "encoder_lr", "tokenizer_lr", "noise",
                 "coarse_scale", "fine_scale", "reset_threshold")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def validate(cfg: RunConfig):
    for k in _POSITIVE_INT:
        v = getattr(cfg, k)
        if not _is_int(v) or v < 1:
            raise ConfigError(k, f"must be a positive integer, got {v!r}")
    for k in _NONNEG_INT:
        v = getattr(cfg, k)
        if not _is_int(v) or v < 0:
            raise ConfigError(k, f"must be a non-negative integer, got {v!r}")
    for k in _NONNEG_FLOAT:
        v = getattr(cfg, k)
        if not _is_num(v) or v < 0:
            raise ConfigError(k, f"must be a non-negative number, got {v!r}")
    for k, opts in _CHOICES.items():
        if getattr(cfg, k) not in opts:
            raise ConfigError(k, f"must be one of {list(opts)}, got {getattr(cfg, k)!r}")
    if not _is_num(cfg.gamma) or not 0 < cfg.gamma < 1:
        raise ConfigError("gamma", f"must lie in (0, 1), got {cfg.gamma!r}")
    if not _is_num(cfg.epsilon) or cfg.epsilon <= 0:
        raise ConfigError("epsilon", f"must be positive, got {cfg.epsilon!r}")
    if not _is_num(cfg.mask_ratio) or not 0 < cfg.mask_ratio < 1:
        raise ConfigError("mask_ratio", f"must lie in (0, 1), got {cfg.mask_ratio!r}")
    if cfg.seq_len < 2:
        raise ConfigError("seq_len", "must be at least 2 so masking leaves a visible position")
    if cfg.soft_k > cfg.codebook_size:
        raise ConfigError("soft_k", f"cannot exceed codebook_size={cfg.codebook_size}")
    if not isinstance(cfg.joint_mode, bool):
        raise ConfigError("joint_mode", f"must be a boolean, got {cfg.joint_mode!r}")
    tue = cfg.tokenizer_update_every
    if tue is not None and (not _is_int(tue) or tue < 1):
        raise ConfigError("tokenizer_update_every", f"must be a positive integer or null, got {tue!r}")


def from_mapping(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    preset = data.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base.update(PRESETS[preset])
    known = {f.name for f in fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    base.update(data)
    # YAML reads 1e-5 as a string
    for f in fields(RunConfig):
        v = base.get(f.name)
        if isinstance(v, str) and f.type in ("float", "Optional[float]"):
            try:
                base[f.name] = float(v)
            except ValueError:
                raise ConfigError(f.name, f"not a number: {v!r}") from None
    return RunConfig(**base)


def parse_config(source: Union[str, Path, None] = None, text: Optional[str] = None) -> RunConfig:
    """Load a YAML config from a path or from ``text``; missing keys take defaults."""
    if text is None:
        text = "" if source is None else Path(source).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"invalid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<document>", "top level must be a mapping")
    return from_mapping(data)


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
