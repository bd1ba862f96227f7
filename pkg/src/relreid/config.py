"""Run configuration: a flat JSON document covering head and training knobs.

Unknown keys and type mismatches are rejected with a JSON pointer to the
offending key, before any work starts. ``{}`` resolves to the full default
configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .head import HeadConfig


@dataclass
class DecaySchedule:
    start_epoch: int = 40
    period: int = 20
    factor: float = 0.1

    def __post_init__(self):
        if self.start_epoch < 0 or self.period < 1:
            raise ConfigError(f"invalid decay schedule {self}")
        if not 0 < self.factor <= 1:
            raise ConfigError(f"decay factor must be in (0, 1], got {self.factor}")


@dataclass
class TrainConfig:
    n_k: int = 16                 # identities per batch
    n_m: int = 4                  # images per identity
    epochs: int = 80
    lr: float = 1e-2              # head parameters
    lr_backbone: float = 1e-3     # reserved for exporter fine-tuning; unused here
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ce_weight: float = 2.0        # "lambda" in the config document
    margin: float = 0.3           # "alpha" in the config document
    seed: int = 0
    decay: DecaySchedule = field(default_factory=DecaySchedule)

    def __post_init__(self):
        if self.n_k < 2 or self.n_m < 2:
            raise ConfigError(f"need n_k >= 2 and n_m >= 2, got {self.n_k}, {self.n_m}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.lr <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.ce_weight < 0 or self.margin < 0:
            raise ConfigError("weight_decay, lambda and alpha must be nonnegative")

    @property
    def batch_size(self) -> int:
        return self.n_k * self.n_m


# JSON key -> (section, attribute, expected types)
_SCHEMA = {
    "channels": ("head", "channels", int),
    "embed_dim": ("head", "embed_dim", int),
    "parts": ("head", "scales", (int, list)),
    "part_pool": ("head", "part_pool", str),
    "global_mode": ("head", "global_mode", str),
    "relation": ("head", "relation", bool),
    "use_global": ("head", "use_global", bool),
    "use_local": ("head", "use_local", bool),
    "n_k": ("train", "n_k", int),
    "n_m": ("train", "n_m", int),
    "epochs": ("train", "epochs", int),
    "lr": ("train", "lr", (int, float)),
    "lr_backbone": ("train", "lr_backbone", (int, float)),
    "momentum": ("train", "momentum", (int, float)),
    "weight_decay": ("train", "weight_decay", (int, float)),
    "lambda": ("train", "ce_weight", (int, float)),
    "alpha": ("train", "margin", (int, float)),
    "seed": ("train", "seed", int),
    "decay_start": ("train", "decay_start", int),
    "decay_period": ("train", "decay_period", int),
    "decay_factor": ("train", "decay_factor", (int, float)),
}


@dataclass
class RunConfig:
    head: HeadConfig
    train: TrainConfig

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}")
        head_kw: dict = {}
        train_kw: dict = {}
        decay_kw: dict = {}
        for key, value in doc.items():
            if key not in _SCHEMA:
                raise ConfigError(f"/{key}: unknown configuration key")
            section, attr, types = _SCHEMA[key]
            if isinstance(value, bool) and types is not bool:
                raise ConfigError(f"/{key}: expected {_type_name(types)}, got a boolean")
            if not isinstance(value, types):
                raise ConfigError(
                    f"/{key}: expected {_type_name(types)}, got {type(value).__name__}")
            if key == "parts":
                value = [value] if isinstance(value, int) else value
                if not value or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise ConfigError("/parts: expected a positive integer or a list of them")
                value = tuple(value)
            if attr.startswith("decay_"):
                decay_kw[attr.removeprefix("decay_").replace("start", "start_epoch")] = value
            elif section == "head":
                head_kw[attr] = value
            else:
                train_kw[attr] = value
        if decay_kw:
            train_kw["decay"] = DecaySchedule(**decay_kw)
        return cls(head=HeadConfig(**head_kw), train=TrainConfig(**train_kw))

    def to_dict(self) -> dict:
        h, t = self.head, self.train
        return {
            "channels": h.channels,
            "embed_dim": h.embed_dim,
            "parts": list(h.scales),
            "part_pool": h.part_pool,
            "global_mode": h.global_mode,
            "relation": h.relation,
            "use_global": h.use_global,
            "use_local": h.use_local,
            "n_k": t.n_k,
            "n_m": t.n_m,
            "epochs": t.epochs,
            "lr": t.lr,
            "lr_backbone": t.lr_backbone,
            "momentum": t.momentum,
            "weight_decay": t.weight_decay,
            "lambda": t.ce_weight,
            "alpha": t.margin,
            "seed": t.seed,
            "decay_start": t.decay.start_epoch,
            "decay_period": t.decay.period,
            "decay_factor": t.decay.factor,
        }


def _type_name(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    return RunConfig.from_dict(doc)
