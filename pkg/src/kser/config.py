"""Flat experiment configuration shared by every CLI command.

A config is one JSON object whose keys are the fields of
:class:`ExperimentConfig`. ``--set key=value`` overrides are parsed as JSON
when possible and as bare strings otherwise, so ``--set lr=5e-4`` and
``--set ablation=no_esa`` both work.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import ABLATIONS, STRATEGIES, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    # data: a TSV log, a prepared cache directory, or a synthetic spec
    data: str | None = None
    dataset_kind: str = "movielens"
    synthetic: dict | str | None = None
    synthetic_seed: int = 0
    history_len: int = 30
    embed_dim: int = 8
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    # knowledge
    knowledge: str | None = None
    strict_knowledge: bool = False
    # model
    backbone: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    chunks: int = 4
    kappa: float = 2.0
    gate_hidden: int | None = None
    x_chunks: int = 4
    k_chunks: int = 4
    n: int = 16
    m: int = 16
    heads: int = 2
    query: str = "history_item"
    scaled_attention: bool = False
    refine_hidden: int | None = None
    refine_out: int | None = None
    out_width: int | None = None
    ablation: str = "none"
    # training
    strategy: str = "base"
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    max_steps: int | None = None
    audit_every: int = 0
    base_checkpoint: str | None = None
    # ablate
    variants: list[str] = field(default_factory=lambda: list(ABLATIONS))
    seeds: list[int] | None = None
    # evaluate / diagnostics
    checkpoint: str | None = None
    eval_split: str = "test"
    n_samples: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = (), **forced) -> "ExperimentConfig":
        d: dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            try:
                d = json.loads(path.read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(d, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            d[key.strip()] = parse_value(raw)
        d.update({k: v for k, v in forced.items() if v is not None})
        return cls.from_dict(d)

    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        for f in fields(self):
            v = getattr(self, f.name)
            default = f.default if f.default is not MISSING else f.default_factory()
            if isinstance(default, bool):
                need(isinstance(v, bool), f.name, f"expected true/false, got {v!r}")
            elif isinstance(default, int):
                need(isinstance(v, int) and not isinstance(v, bool), f.name, f"expected an integer, got {v!r}")
            elif isinstance(default, float):
                need(isinstance(v, (int, float)) and not isinstance(v, bool), f.name, f"expected a number, got {v!r}")
        for key in ("gate_hidden", "refine_hidden", "refine_out", "out_width", "max_steps"):
            v = getattr(self, key)
            need(v is None or (isinstance(v, int) and not isinstance(v, bool) and v >= 0), key,
                 f"expected null or a non-negative integer, got {v!r}")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {list(STRATEGIES)}")
        need(self.ablation in ABLATIONS, "ablation", f"must be one of {list(ABLATIONS)}")
        need(self.dataset_kind in ("movielens", "amazon_book"), "dataset_kind", "must be movielens or amazon_book")
        need(self.strategy != "extractor_only" or self.base_checkpoint, "base_checkpoint",
             "required when strategy is extractor_only")
        need(self.lr > 0, "lr", "must be positive")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.max_epochs >= 0, "max_epochs", "must be >= 0")
        need(self.patience >= 1, "patience", "must be >= 1")
        need(self.history_len >= 1, "history_len", "must be >= 1")
        need(self.n_samples >= 0, "n_samples", "must be >= 0")
        need(self.eval_split in ("train", "val", "test"), "eval_split", "must be train, val or test")
        need(isinstance(self.split, list) and len(self.split) == 3, "split", "needs three ratios")
        need(isinstance(self.hidden, list) and self.hidden and all(isinstance(h, int) and h > 0 for h in self.hidden),
             "hidden", "must be a non-empty list of positive integers")
        need(isinstance(self.variants, list) and self.variants and all(v in ABLATIONS for v in self.variants),
             "variants", f"must be a non-empty list drawn from {list(ABLATIONS)}")
        need(len(set(self.variants)) == len(self.variants), "variants", "must not repeat")
        need(self.seeds is None or (isinstance(self.seeds, list) and self.seeds
                                    and all(isinstance(s, int) for s in self.seeds)),
             "seeds", "must be a non-empty list of integers")
        need(self.data is None or self.synthetic is None, "data", "give either data or synthetic, not both")
        need(self.kappa > 0, "kappa", "must be positive")
        need(min(self.chunks, self.x_chunks, self.k_chunks, self.n, self.m, self.heads) >= 1, "chunks",
             "chunk counts, n, m and heads must all be >= 1")
        need(self.m % self.heads == 0, "m", f"must be divisible by heads={self.heads}")

    def model_config(self, **over) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        d = {k: v for k, v in asdict(self).items() if k in names}
        d.update(over)
        return ModelConfig(**d)

    def train_config(self, **over) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        d = {k: v for k, v in asdict(self).items() if k in names}
        d.update(over)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
