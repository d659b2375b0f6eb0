"""Experiment configuration: every knob, JSON-serialized, strictly validated."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = 1
BASELINE_SOURCES = ("model", "degraded")


@dataclass
class SegTrainConfig:
    depth: int = 3
    base_width: int = 16
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 8


@dataclass
class DiffTrainConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    depth: int = 3
    base_width: int = 16
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 8
    inference_steps: int = 50
    reverse_mean: str = "standard"
    condition_on_image: bool = True
    condition_on_mask: bool = True
    baseline: str = "model"  # "degraded" trains/evaluates against stress-degraded masks


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset_dir: str = ""
    out_dir: str = ""
    lambda_weight: float = 0.5
    finetune_epochs: int = 5
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    diff: DiffTrainConfig = field(default_factory=DiffTrainConfig)
    ablation_steps: tuple = (25, 50, 100)


_NESTED = {"seg": SegTrainConfig, "diff": DiffTrainConfig}


def _from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        where = f"{path}.{name}" if path else name
        if name in _NESTED:
            kwargs[name] = _from_dict(_NESTED[name], value, where)
        elif name == "ablation_steps":
            kwargs[name] = tuple(int(v) for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, d, "")
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["ablation_steps"] = list(cfg.ablation_steps)
    return out


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}")
    if cfg.lambda_weight < 0:
        raise ConfigError(f"lambda_weight must be >= 0, got {cfg.lambda_weight}")
    if cfg.finetune_epochs < 0 or cfg.seg.epochs < 0 or cfg.diff.epochs < 0:
        raise ConfigError("epoch counts must be >= 0")
    if cfg.seg.batch_size < 1 or cfg.diff.batch_size < 1:
        raise ConfigError("batch sizes must be >= 1")
    if cfg.seg.lr < 0 or cfg.diff.lr < 0:
        raise ConfigError("learning rates must be >= 0")
    if cfg.diff.T < 1:
        raise ConfigError(f"diff.T must be >= 1, got {cfg.diff.T}")
    if not (0 < cfg.diff.beta_start <= cfg.diff.beta_end < 1):
        raise ConfigError(
            f"beta bounds must satisfy 0 < start <= end < 1, got ({cfg.diff.beta_start}, {cfg.diff.beta_end})"
        )
    if not 0 <= cfg.diff.inference_steps <= cfg.diff.T:
        raise ConfigError(f"inference_steps must lie in [0, T], got {cfg.diff.inference_steps}")
    if cfg.diff.reverse_mean not in ("standard", "literal"):
        raise ConfigError(f"reverse_mean must be 'standard' or 'literal', got {cfg.diff.reverse_mean!r}")
    if cfg.diff.baseline not in BASELINE_SOURCES:
        raise ConfigError(f"diff.baseline must be one of {BASELINE_SOURCES}, got {cfg.diff.baseline!r}")
    if any(s < 1 or s > cfg.diff.T for s in cfg.ablation_steps):
        raise ConfigError(f"ablation_steps must lie in [1, T], got {cfg.ablation_steps}")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=1)
