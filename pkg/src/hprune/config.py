"""Training configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

TASKS = ("toy_sv", "toy_spoof")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "toy_sv"
    target_sparsity: float = 0.5
    epochs: int = 10
    batch_size: int = 32
    lr_weights: float = 1e-3
    lr_gates: float = 5e-2
    lr_multipliers: float = 2.0
    seed: int = 0
    preset: str = "small"
    eval_every: int = 1
    out_dir: str = "runs/default"
    warmup_epochs: float = 5.0
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    data: str = "full"
    data_seed: int = 0
    spoof_amplitude: float = 0.05
    precision: str = "float64"
    checkpoint_every: int = 1
    recovery_epochs: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not (0.0 <= self.target_sparsity < 1.0):
            raise ConfigError("target_sparsity must lie in [0, 1)")
        for name in ("lr_weights", "lr_gates", "lr_multipliers", "warmup_epochs", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "batch_size", "eval_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be float64 or float32")
        if self.data not in ("full", "small"):
            raise ConfigError("data must be 'full' or 'small'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_HINTS = typing.get_type_hints(TrainConfig)
FIELD_NAMES = tuple(f.name for f in fields(TrainConfig))


def _coerce(key: str, raw: str):
    typ = _HINTS[key]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(pairs, base: dict | None = None) -> dict:
    """Apply ``key=value`` strings on top of ``base``; unknown keys are rejected."""
    out = dict(base or {})
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _HINTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


def read_config_file(path) -> dict:
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_pairs(lines)


def write_config_file(config: TrainConfig, path) -> None:
    text = "".join(f"{k}={v}\n" for k, v in config.to_dict().items())
    Path(path).write_text(text)


def load_config(path=None, overrides=(), **direct) -> TrainConfig:
    values = read_config_file(path) if path else {}
    values = parse_pairs(overrides, values)
    for key, value in direct.items():
        if value is None:
            continue
        if key not in _HINTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return TrainConfig(**values)
