"""Training configuration and its YAML form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .quantizer import TokenizerConfig
from .seqmodel import ModelConfig
from .soda import SodaConfig

ABLATIONS = ("full", "no_neg", "no_loss", "no_alter")


@dataclass
class TrainConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    soda: SodaConfig = field(default_factory=SodaConfig)
    k_core: int = 5
    max_len: int = 20
    n_disambiguation: int = 32
    batch_size: int = 64
    tokenizer_batch_size: int = 64
    rec_lr: float = 1e-3
    tokenizer_lr: float = 1e-3
    pretrain_epochs: int = 100
    rec_epochs_per_cycle: int = 5
    tokenizer_epochs_per_cycle: int = 1
    cycles: int = 10
    beam_size: int = 30
    ks: tuple[int, ...] = (10, 20)
    eval_batch_size: int = 64
    dtype: str = "float32"
    sequential: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("k_core", "max_len", "batch_size", "pretrain_epochs", "rec_epochs_per_cycle",
                     "tokenizer_epochs_per_cycle", "cycles", "beam_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.ks = tuple(self.ks)

    def with_seed(self, seed: int) -> "TrainConfig":
        """Copy with ``seed`` applied to every seeded component."""
        cfg = dataclasses.replace(self, seed=seed)
        cfg.tokenizer = dataclasses.replace(self.tokenizer, seed=seed)
        cfg.model = dataclasses.replace(self.model, seed=seed)
        cfg.soda = dataclasses.replace(self.soda)
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ks"] = list(self.ks)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data or {})
        nested = {"tokenizer": TokenizerConfig, "model": ModelConfig, "soda": SodaConfig}
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value or {}) - sub_known
                if bad:
                    raise ValueError(f"unknown {key} config keys: {sorted(bad)}")
                kwargs[key] = sub(**(value or {}))
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))
