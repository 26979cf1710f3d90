"""Composed CTR models for the base, all-parameters and extractor-only strategies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import EmbeddingLayer, build_trunk, head_with_knowledge
from .data import FeatureSchema
from .esa import ESA, DenseProjection, build_query
from .esfnet import ESFNet

STRATEGIES = ("base", "all_params", "extractor_only")
ABLATIONS = ("none", "no_esfnet", "no_esa")


@dataclass
class ModelConfig:
    backbone: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    # gate
    chunks: int = 4
    kappa: float = 2.0
    gate_hidden: int | None = None
    # alignment
    x_chunks: int = 4
    k_chunks: int = 4
    n: int = 16
    m: int = 16
    heads: int = 2
    query: str = "history_item"
    scaled_attention: bool = False
    refine_hidden: int | None = None
    refine_out: int | None = None
    out_width: int | None = None  # None -> d_e // 2; 0 -> no output projection
    ablation: str = "none"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.m % self.heads:
            raise ValueError(f"m={self.m} must be divisible by heads={self.heads}")


class CTRModel(nn.Module):
    """Embedding layer, backbone trunk, optional knowledge extractor and logistic head.

    ``strategy`` decides where the extractor output enters:

    * ``base``: no knowledge, ``sigmoid(head(trunk(E(x))))``.
    * ``all_params``: ``vec(o) ⊕ E(x)`` is the trunk input.
    * ``extractor_only``: ``sigmoid(head(vec(o) ⊕ trunk(E(x))))``.
    """

    def __init__(self, schema: FeatureSchema, cfg: ModelConfig, strategy: str = "base",
                 d_k: int | None = None, n_fields: int | None = None):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        self.schema, self.cfg, self.strategy = schema, cfg, strategy
        self.d_k, self.n_fields = d_k, n_fields
        self.embedding = EmbeddingLayer(schema)
        d_e = schema.embed_width
        self.gate = self.aligner = None
        o_width = 0
        if strategy != "base":
            if d_k is None or n_fields is None:
                raise ValueError("knowledge strategies need d_k and n_fields")
            if cfg.ablation != "no_esfnet":
                self.gate = ESFNet(d_k, n_fields, d_e, cfg.chunks, cfg.kappa, cfg.gate_hidden)
            proj = d_e // 2 if cfg.out_width is None else cfg.out_width
            if cfg.ablation == "no_esa":
                width = proj or n_fields * cfg.x_chunks * cfg.m
                self.aligner = DenseProjection(d_k, n_fields, width)
            else:
                self.aligner = ESA(d_k, n_fields, self.query_width, cfg.x_chunks, cfg.k_chunks, cfg.n, cfg.m,
                                   cfg.heads, cfg.refine_hidden, cfg.refine_out, proj or None,
                                   cfg.scaled_attention)
            o_width = self.aligner.out_width
        self.trunk = build_trunk(cfg.backbone, schema, o_width if strategy == "all_params" else 0, cfg.hidden)
        head_in = self.trunk.out_width + (o_width if strategy == "extractor_only" else 0)
        self.head = nn.Linear(head_in, 1)
        self.o_width = o_width

    @property
    def query_width(self) -> int:
        if self.cfg.query == "history_item":
            return 2 * self.schema.field("item_id").embed_dim
        return self.schema.embed_width

    def extract(self, emb, knowledge: torch.Tensor) -> dict:
        """Gate and align the knowledge batch ``(B, d_k, L)``."""
        if self.gate is not None:
            kbar, w = self.gate(knowledge, emb.flat)
        else:
            kbar, w = knowledge, None
        query = build_query(emb.history, emb.mask, emb.item, self.cfg.query, emb.flat)
        out = self.aligner(kbar, query)
        out["gate"] = w
        out["kbar"] = kbar
        return out

    def forward(self, fields, history, knowledge=None, return_aux: bool = False):
        emb = self.embedding(fields, history)
        aux = {}
        if self.strategy == "base":
            p = torch.sigmoid(self.head(self.trunk(emb))).squeeze(-1)
        else:
            aux = self.extract(emb, knowledge)
            o = aux["out"]
            if self.strategy == "all_params":
                p = torch.sigmoid(self.head(self.trunk(emb, o))).squeeze(-1)
            else:
                p = head_with_knowledge(self.trunk(emb), o, self.head)
        return (p, aux) if return_aux else p

    def trunk_parameters(self):
        return list(self.trunk.parameters())

    def freeze_trunk(self):
        self.trunk.requires_grad_(False)

    def warm_start_from(self, base: "CTRModel"):
        """Copy embedding and trunk from a trained base model; place its head on the trunk slice.

        The head's knowledge slice starts at zero, so before any update the
        model reproduces the base predictions.
        """
        if base.schema.hash() != self.schema.hash():
            raise ValueError("base checkpoint was trained on a different feature schema")
        if base.cfg.backbone != self.cfg.backbone or list(base.cfg.hidden) != list(self.cfg.hidden):
            raise ValueError("base checkpoint backbone does not match the extractor-only model")
        self.embedding.load_state_dict(base.embedding.state_dict())
        if self.strategy == "extractor_only":
            self.trunk.load_state_dict(base.trunk.state_dict())
            with torch.no_grad():
                self.head.weight.zero_()
                self.head.weight[:, self.o_width:] = base.head.weight
                self.head.bias.copy_(base.head.bias)


def save_checkpoint(model: CTRModel, directory: str | Path, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        (directory / f"{name}.f32").write_bytes(arr.tobytes(order="C"))
        params[name] = list(arr.shape)
    meta = {
        "schema_hash": model.schema.hash(),
        "schema": model.schema.to_dict(),
        "backbone": model.cfg.backbone,
        "strategy": model.strategy,
        "model": asdict(model.cfg),
        "d_k": model.d_k,
        "n_fields": model.n_fields,
        "d_e": model.schema.embed_width,
        "o_width": model.o_width,
        "trunk_width": model.trunk.out_width,
        "params": params,
    }
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | Path, schema: FeatureSchema | None = None) -> CTRModel:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    saved_schema = FeatureSchema.from_dict(meta["schema"])
    if schema is not None and schema.hash() != meta["schema_hash"]:
        raise ValueError(f"schema hash mismatch for checkpoint {directory}")
    model = CTRModel(saved_schema, ModelConfig(**meta["model"]), meta["strategy"], meta["d_k"], meta["n_fields"])
    state = {}
    for name, shape in meta["params"].items():
        raw = (directory / f"{name}.f32").read_bytes()
        state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    model.load_state_dict(state)
    return model
