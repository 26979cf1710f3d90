"""Feature embedding layer and discriminative CTR backbones.

A backbone here is only the *trunk*: everything between the embedding layer
and the output affine map. The output head lives on the owning model so the
trunk can be frozen or reused with a wider head.

Each trunk accepts an optional ``extra`` vector (the flattened knowledge
output) that is concatenated in front of the flat feature embedding, i.e. the
MLP input is ``extra ⊕ E(x)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .data import PAD, FeatureSchema
from .esa import init_linear, masked_mean


@dataclass
class Embedded:
    flat: torch.Tensor            # (B, d_e): field embeddings, then mean-pooled history
    fields: list[torch.Tensor]    # per categorical field (B, w_f)
    history: torch.Tensor | None  # (B, H, w_item)
    mask: torch.Tensor | None     # (B, H) True where not padded
    item: torch.Tensor | None     # target-item embedding (B, w_item)


class EmbeddingLayer(nn.Module):
    def __init__(self, schema: FeatureSchema):
        super().__init__()
        self.schema = schema
        self.tables = nn.ModuleDict({
            f.name: nn.Embedding(f.vocab_size, f.embed_dim, padding_idx=PAD) for f in schema.categorical})
        seq = schema.sequence
        self.seq_table = seq.shares if seq is not None else None
        if seq is not None and seq.shares is None:
            self.tables[seq.name] = nn.Embedding(seq.vocab_size, seq.embed_dim, padding_idx=PAD)
            self.seq_table = seq.name
        for t in self.tables.values():
            nn.init.normal_(t.weight, std=0.05)
            with torch.no_grad():
                t.weight[PAD].zero_()
        self.width = schema.embed_width

    def forward(self, fields: torch.Tensor, history: torch.Tensor | None = None) -> Embedded:
        names = [f.name for f in self.schema.categorical]
        if fields.shape[1] != len(names):
            raise ValueError(f"expected {len(names)} categorical columns, got {fields.shape[1]}")
        embs = [self.tables[n](fields[:, j]) for j, n in enumerate(names)]
        hist = mask = None
        parts = list(embs)
        if self.seq_table is not None:
            if history is None:
                raise ValueError("schema has a history field but no history was given")
            hist = self.tables[self.seq_table](history)
            mask = history != PAD
            parts.append(masked_mean(hist, mask))
        item = embs[names.index("item_id")] if "item_id" in names else None
        return Embedded(torch.cat(parts, dim=1), embs, hist, mask, item)


def mlp(widths: list[int]) -> nn.Sequential:
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [init_linear(nn.Linear(a, b), relu=True), nn.ReLU()]
    return nn.Sequential(*layers)


class Trunk(nn.Module):
    out_width: int

    def forward(self, emb: Embedded, extra: torch.Tensor | None = None) -> torch.Tensor:
        raise NotImplementedError

    @staticmethod
    def _join(extra, x):
        return x if extra is None else torch.cat([extra, x], dim=1)


class MLPTrunk(Trunk):
    def __init__(self, in_width: int, hidden=(128, 64)):
        super().__init__()
        self.net = mlp([in_width, *hidden])
        self.in_width = in_width
        self.out_width = hidden[-1]

    def forward(self, emb, extra=None):
        x = self._join(extra, emb.flat)
        if x.shape[1] != self.in_width:
            raise ValueError(f"trunk expects width {self.in_width}, got {x.shape[1]}")
        return self.net(x)


def fm_interaction(field_embs: torch.Tensor) -> torch.Tensor:
    """Second-order FM term summed over latent dims: (B, F, k) -> (B, 1)."""
    square_of_sum = field_embs.sum(dim=1).pow(2)
    sum_of_square = field_embs.pow(2).sum(dim=1)
    return 0.5 * (square_of_sum - sum_of_square).sum(dim=1, keepdim=True)


class DeepFMLiteTrunk(MLPTrunk):
    """MLP tower plus the FM pairwise term over field embeddings (pooled history included)."""

    def __init__(self, in_width: int, hidden=(128, 64)):
        super().__init__(in_width, hidden)
        self.out_width = hidden[-1] + 1

    def forward(self, emb, extra=None):
        deep = super().forward(emb, extra)
        vecs = list(emb.fields)
        if emb.history is not None:
            vecs.append(masked_mean(emb.history, emb.mask))
        if len({v.shape[1] for v in vecs}) != 1:
            raise ValueError("deepfm_lite needs equal embedding widths across fields")
        return torch.cat([deep, fm_interaction(torch.stack(vecs, dim=1))], dim=1)


class DINLiteTrunk(MLPTrunk):
    """Target attention over the history replaces mean pooling, then an MLP."""

    def __init__(self, in_width: int, hidden=(128, 64), item_width: int = 8, att_hidden: int = 32):
        super().__init__(in_width, hidden)
        self.att = nn.Sequential(init_linear(nn.Linear(4 * item_width, att_hidden), relu=True), nn.ReLU(),
                                 init_linear(nn.Linear(att_hidden, 1)))

    def attention_weights(self, hist, mask, item):
        tgt = item.unsqueeze(1).expand_as(hist)
        logits = self.att(torch.cat([hist, tgt, hist - tgt, hist * tgt], dim=-1)).squeeze(-1)
        # finite fill keeps all-pad rows NaN-free; the mask then zeroes them
        logits = logits.masked_fill(~mask, -1e9)
        return torch.softmax(logits, dim=1) * mask

    def forward(self, emb, extra=None):
        if emb.history is None:
            raise ValueError("din_lite needs a history field")
        w = self.attention_weights(emb.history, emb.mask, emb.item)
        pooled = (w.unsqueeze(-1) * emb.history).sum(dim=1)
        x = torch.cat(list(emb.fields) + [pooled], dim=1)
        x = self._join(extra, x)
        if x.shape[1] != self.in_width:
            raise ValueError(f"trunk expects width {self.in_width}, got {x.shape[1]}")
        return self.net(x)


def _din(in_width, hidden, schema):
    return DINLiteTrunk(in_width, hidden, item_width=schema.field("item_id").embed_dim)


BACKBONES: dict[str, Callable[..., Trunk]] = {
    "mlp": lambda in_width, hidden, schema: MLPTrunk(in_width, hidden),
    "deepfm_lite": lambda in_width, hidden, schema: DeepFMLiteTrunk(in_width, hidden),
    "din_lite": _din,
}


def build_trunk(kind: str, schema: FeatureSchema, extra_width: int = 0, hidden=(128, 64)) -> Trunk:
    try:
        factory = BACKBONES[kind]
    except KeyError:
        raise ValueError(f"unknown backbone {kind!r}; available: {sorted(BACKBONES)}") from None
    return factory(extra_width + schema.embed_width, tuple(hidden), schema)


def head_with_knowledge(trunk_out: torch.Tensor, o_flat: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Logistic output of the affine head over ``vec(o) ⊕ trunk``."""
    x = torch.cat([o_flat, trunk_out], dim=1)
    if x.shape[1] != head.in_features:
        raise ValueError(f"head expects width {head.in_features}, got {x.shape[1]}")
    return torch.sigmoid(head(x)).squeeze(-1)
