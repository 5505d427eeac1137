"""Experiment configuration: ``key = value`` files, presets and flag overrides.

Precedence, lowest first: field defaults, the selected preset, the config
file, command-line overrides. Field defaults hold the full-scale
hyperparameters; the ``desk`` preset (the default) shrinks the federation
and dataset so a full run takes minutes on one core.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from fedsmooth.errors import ConfigError

CHOICES = {
    "preset": ("desk", "full"),
    "mode": ("fed", "central"),
    "ablation": ("standard", "adv_only", "adv_smooth"),
    "estimator": ("stochastic", "one_point"),
    "dataset": ("blobs", "idx"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    mode: str = "fed"
    ablation: str = "adv_smooth"
    estimator: str = "stochastic"
    sigma: float = 0.25
    epsilon: float = 128.0  # 0-255 pixel scale; divided by 256 for [0, 1] inputs
    gamma: float = 0.5
    seed: int = 0
    workers: int = 1

    # data
    dataset: str = "idx"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0  # 0 keeps every row
    blob_classes: int = 10
    blob_per_class: int = 250
    blob_dim: int = 64
    blob_spread: float = 0.05
    blob_radius: float = 0.25
    blob_background: int = 0  # always-zero trailing features
    train_fraction: float = 0.8
    hidden: str = "256,128"

    # federation (full scale)
    num_devices: int = 1000
    participation: float = 0.1
    samples_per_device: int = 500
    local_batches: int = 20
    batch_size: int = 30
    central_batch_size: int = 60
    rounds: int = 150
    outer_lr: float = 0.01

    # attack
    m: int = 2
    pgd_steps: int = 2
    inner_lr: float = 0.01

    # certification
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001
    cert_points: int = 200
    radius_max: float = 1.5
    radius_step: float = 0.05

    bench_attacks: int = 500
    out: str = "runs"
    checkpoint: str = ""

    def __post_init__(self):
        for key, options in CHOICES.items():
            if getattr(self, key) not in options:
                raise ConfigError(f"{key} must be one of {', '.join(options)}, got {getattr(self, key)!r}")
        for key in ("sigma", "epsilon", "outer_lr", "inner_lr", "radius_max", "radius_step", "blob_radius"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 < self.participation <= 1:
            raise ConfigError(f"participation must lie in (0, 1], got {self.participation}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.blob_spread < 0:
            raise ConfigError(f"blob_spread must be >= 0, got {self.blob_spread}")
        for key in ("num_devices", "samples_per_device", "batch_size", "central_batch_size", "m", "pgd_steps",
                    "n0", "n", "cert_points", "bench_attacks", "workers", "blob_classes", "blob_per_class",
                    "blob_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("local_batches", "rounds", "subset", "blob_background"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.n0 > self.n:
            raise ConfigError(f"n0 must not exceed n, got n0={self.n0}, n={self.n}")
        try:
            sizes = [int(t) for t in self.hidden.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"hidden must be comma-separated integers, got {self.hidden!r}") from None
        if any(s < 1 for s in sizes):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden!r}")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(t) for t in self.hidden.split(",") if t.strip())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    # 2000 samples of 512 features (64 informative, 448 blank), 20 devices
    "desk": {
        "dataset": "blobs",
        "subset": 2000,
        "blob_classes": 10,
        "blob_per_class": 200,
        "blob_dim": 64,
        "blob_background": 448,
        "blob_radius": 1.8,
        "blob_spread": 0.05,
        "num_devices": 20,
        "participation": 0.5,
        "samples_per_device": 100,
        "rounds": 30,
        "outer_lr": 0.1,
    },
}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: Any) -> Any:
    kind = _FIELDS[key].type
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key} expects {kind}, got {text!r}") from None
    return text


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def parse_config(path=None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Build a config from an optional file plus overrides (flags win)."""
    file_values = read_config_file(path) if path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted((set(file_values) | set(overrides)) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    preset = str(overrides.get("preset", file_values.get("preset", ExperimentConfig.preset))).strip()
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {', '.join(PRESETS)}, got {preset!r}")
    merged: dict[str, Any] = dict(PRESETS[preset])
    merged.update(file_values)
    merged.update(overrides)
    merged["preset"] = preset
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in merged.items()})
