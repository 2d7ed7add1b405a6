"""Run configuration: TOML file with ``model``, ``train`` and ``data`` sections."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import SynthParams
from .model import ModelConfig
from .optim import POLICIES

OUT_DIR_ENV = "IRISUSFORMER_OUT"
ABLATIONS = ("without_c", "without_a", "without_u")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 300
    batch_size: int = 4
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycle_length: int = 400
    policy: str = "triangular"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1e-3
    epsilon: float = 1.0
    without_u: bool = False
    variant: str = "normalized"
    augment: bool = True
    checkpoint_every: int = 0

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.variant not in ("normalized", "literal"):
            raise ConfigError(f"variant must be 'normalized' or 'literal', got {self.variant!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.alpha < 0 or self.epsilon <= 0:
            raise ConfigError("alpha must be >= 0 and epsilon > 0")


@dataclass
class DataConfig:
    train_manifest: str = ""
    test_manifest: str = ""
    num_train: int = 4
    num_test: int = 4
    synth: SynthParams = field(default_factory=SynthParams)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(base_channels=16))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self):
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
        self.train.validate()

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV) or self.out_dir)

    def with_ablation(self, name: str | None) -> "RunConfig":
        """Copy with one named ablation switched on."""
        cfg = from_dict(to_dict(self))
        if name is None:
            return cfg
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
        if name == "without_c":
            cfg.model.use_conv_projection = False
        elif name == "without_a":
            cfg.model.use_cross_attention = False
        else:
            cfg.train.without_u = True
        return cfg


PRESETS = {
    "desk": {},
    "full": {"model": {"base_channels": 32},
              "train": {"iterations": 30000, "batch_size": 10, "cycle_length": 4000,
                        "lr_min": 1e-5, "lr_max": 1e-3, "alpha": 1e-3, "epsilon": 1.0}},
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        sub = {ModelConfig: ModelConfig, TrainConfig: TrainConfig, DataConfig: DataConfig,
               SynthParams: SynthParams}
        ftype = known[name].type
        target = next((c for c in sub.values() if ftype in (c, c.__name__)), None)
        kwargs[name] = _build(target, value, f"{where}.{name}") if target else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def from_dict(values: dict) -> RunConfig:
    """Build a validated config; omitted keys take the desk defaults."""
    cfg = _build(RunConfig, _merge(to_dict(RunConfig()), values), "config")
    cfg.validate()
    return cfg


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items() if v is not None}
    return value


def to_dict(cfg: RunConfig) -> dict:
    return _plain(dataclasses.asdict(cfg))


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> RunConfig:
    try:
        values = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(values)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return loads(text)


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return from_dict(PRESETS[name])
