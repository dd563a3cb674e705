"""TOML experiment configuration with ``desk``, ``full`` and ``overfit`` presets."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from mambacad.gan import GanConfig
from mambacad.model import ModelConfig
from mambacad.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    count: int = 1000
    min_len: int = 10
    max_len: int = 128
    distribution: str = "reference"  # reference | uniform


@dataclass
class EvalSection:
    n_points: int = 2000
    export_res: int = 32
    mask_ratio: float = 0.4


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "gan": self.gan.to_dict(),
            "synth": vars(self.synth).copy(),
            "eval": vars(self.eval).copy(),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def full_preset() -> ExperimentConfig:
    """Full-size dimensions and schedules (GPU scale)."""
    return ExperimentConfig(
        train=TrainConfig(batch_size=32, epochs=10),
        gan=GanConfig(steps=200_000, batch_size=256),
    )


def desk_preset() -> ExperimentConfig:
    """Single-CPU scale: narrow encoder, short schedules."""
    return ExperimentConfig(
        model=ModelConfig(d_model=64, n_blocks=2, d_state=8, scan="sequential"),
        train=TrainConfig(batch_size=16, max_steps=1500, warmup_steps=100),
        gan=GanConfig(steps=1000, batch_size=64),
        synth=SynthSection(count=400),
        eval=EvalSection(n_points=512, export_res=32),
    )


def overfit_preset() -> ExperimentConfig:
    """64-record memorization run: full batch, early stop at the accuracy targets."""
    return ExperimentConfig(
        model=ModelConfig(d_model=32, n_blocks=2, d_state=8, scan="sequential"),
        train=TrainConfig(
            lr=3e-3, warmup_steps=100, batch_size=64, max_steps=3000,
            eval_every=100, target_ac=0.99, target_ap=0.95,
        ),
        synth=SynthSection(count=64),
    )


PRESETS = {"desk": desk_preset, "full": full_preset, "overfit": overfit_preset}


def _apply(obj, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        current = getattr(obj, key)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be a boolean")
        if isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif current is not None and not isinstance(value, type(current)):
            raise ConfigError(f"{where}.{key} must be {type(current).__name__}, got {type(value).__name__}")
        updates[key] = value
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def from_dict(data: dict, preset: str = "desk") -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    data = dict(data)
    preset = data.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    seed = data.pop("seed", cfg.seed)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    sections = {"model": cfg.model, "train": cfg.train, "gan": cfg.gan, "synth": cfg.synth, "eval": cfg.eval}
    for key in data:
        if key not in sections:
            raise ConfigError(f"unknown section [{key}]")
    for key, table in data.items():
        sections[key] = _apply(sections[key], table, key)
    out = ExperimentConfig(seed=seed, **sections)
    if out.synth.distribution not in ("reference", "uniform"):
        raise ConfigError("synth.distribution must be 'reference' or 'uniform'")
    return out


def load(path: str | Path | None, preset: str = "desk") -> ExperimentConfig:
    if path is None:
        return from_dict({}, preset)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data, preset)
