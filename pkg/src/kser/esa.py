"""Attention-based alignment of filtered knowledge with the feature space.

Per knowledge field: Dense-ReLU-Dense refinement, split into ``C_k`` chunk
rows, then cross-attention where queries come from the feature side (stacked
into ``C_x`` rows). Per-field outputs are stacked and fused with multi-head
self-attention, flattened row-major and optionally projected.
"""
from __future__ import annotations

import math

import torch
from torch import nn


def fan_in_uniform_(weight: torch.Tensor, relu: bool = False) -> torch.Tensor:
    """Variance-preserving symmetric uniform init on the input dimension.

    Works on ``nn.Linear`` weights (out, in); for raw ``(in, out)`` matrices
    pass the transpose.
    """
    fan_in = weight.shape[1]
    bound = math.sqrt((6.0 if relu else 3.0) / fan_in)
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


def init_linear(layer: nn.Linear, relu: bool = False) -> nn.Linear:
    fan_in_uniform_(layer.weight, relu)
    nn.init.zeros_(layer.bias)
    return layer


def stack_chunks(v: torch.Tensor, n_chunks: int) -> torch.Tensor:
    """``(..., W)`` -> ``(..., n_chunks, W / n_chunks)``; row r is slice r."""
    width = v.shape[-1]
    if n_chunks < 1 or width % n_chunks:
        raise ValueError(f"width {width} is not divisible into {n_chunks} chunks")
    return v.reshape(*v.shape[:-1], n_chunks, width // n_chunks)


def masked_mean(hist: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid history rows; an all-pad history gives zeros."""
    m = mask.to(hist.dtype).unsqueeze(-1)
    count = m.sum(dim=1).clamp(min=1.0)
    return (hist * m).sum(dim=1) / count


def build_query(hist_emb: torch.Tensor | None, hist_mask: torch.Tensor | None,
                item_emb: torch.Tensor | None, strategy: str = "history_item",
                feat_emb: torch.Tensor | None = None) -> torch.Tensor:
    if strategy == "history_item":
        return torch.cat([masked_mean(hist_emb, hist_mask), item_emb], dim=-1)
    if strategy == "full_feature":
        return feat_emb
    raise ValueError(f"unknown query strategy {strategy!r}")


def cross_attend(x_stacked: torch.Tensor, k_stacked: torch.Tensor, W_Q, W_K, W_V,
                 scaled: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """``softmax(Q K^T) V`` with Q from features and K, V from knowledge.

    Shapes: x ``(B, C_x, d_x)``, k ``(B, C_k, d_k')``; returns outputs
    ``(B, C_x, m)`` and scores ``(B, C_x, C_k)``.
    """
    if x_stacked.shape[-1] != W_Q.shape[0] or k_stacked.shape[-1] != W_K.shape[0]:
        raise ValueError("stacked widths do not match projection matrices")
    q, k, v = x_stacked @ W_Q, k_stacked @ W_K, k_stacked @ W_V
    logits = q @ k.transpose(-1, -2)
    if scaled:
        logits = logits / math.sqrt(q.shape[-1])
    scores = torch.softmax(logits, dim=-1)
    return scores @ v, scores


class SelfAttention(nn.Module):
    """Multi-head self-attention over rows, standard 1/sqrt(head width) scaling."""

    def __init__(self, width: int, heads: int = 2):
        super().__init__()
        if width % heads:
            raise ValueError(f"self-attention width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = init_linear(nn.Linear(width, width))
        self.k = init_linear(nn.Linear(width, width))
        self.v = init_linear(nn.Linear(width, width))
        self.out = init_linear(nn.Linear(width, width))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, R, W = x.shape
        hw = W // self.heads

        def split(t):
            return t.reshape(B, R, self.heads, hw).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hw), dim=-1)
        ctx = (scores @ v).transpose(1, 2).reshape(B, R, W)
        return self.out(ctx), scores


def fuse_fields(per_field: list[torch.Tensor], attn: SelfAttention) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Row-concatenate per-field outputs, self-attend, flatten row-major.

    Returns ``(fused, flat, scores)`` where fused is ``(B, L*C_x, m)``.
    """
    if not per_field:
        raise ValueError("need at least one knowledge field to fuse")
    if len({tuple(t.shape) for t in per_field}) != 1:
        raise ValueError("per-field outputs must share one shape")
    combined = torch.cat(per_field, dim=1)
    fused, scores = attn(combined)
    return fused, fused.reshape(fused.shape[0], -1), scores


class FieldAligner(nn.Module):
    """Refinement MLP and cross-attention projections for one knowledge field."""

    def __init__(self, d_k: int, refine_hidden: int, refine_out: int, d_x: int, k_chunks: int, n: int, m: int):
        super().__init__()
        if refine_out % k_chunks:
            raise ValueError(f"refined width {refine_out} not divisible by C_k={k_chunks}")
        self.k_chunks = k_chunks
        self.refine = nn.Sequential(init_linear(nn.Linear(d_k, refine_hidden), relu=True), nn.ReLU(),
                                    init_linear(nn.Linear(refine_hidden, refine_out)))
        dk_row = refine_out // k_chunks
        self.W_Q = nn.Parameter(torch.empty(d_x, n))
        self.W_K = nn.Parameter(torch.empty(dk_row, n))
        self.W_V = nn.Parameter(torch.empty(dk_row, m))
        for p in (self.W_Q, self.W_K, self.W_V):
            fan_in_uniform_(p.T)

    def forward(self, x_stacked, kbar_j, scaled=False):
        k_stacked = stack_chunks(self.refine(kbar_j), self.k_chunks)
        return cross_attend(x_stacked, k_stacked, self.W_Q, self.W_K, self.W_V, scaled)


class ESA(nn.Module):
    def __init__(self, d_k: int, n_fields: int, query_width: int, x_chunks: int = 4, k_chunks: int = 4,
                 n: int = 16, m: int = 16, heads: int = 2, refine_hidden: int | None = None,
                 refine_out: int | None = None, out_width: int | None = None, scaled_attention: bool = False):
        super().__init__()
        if query_width % x_chunks:
            raise ValueError(f"query width {query_width} not divisible by C_x={x_chunks}")
        refine_hidden = refine_hidden or d_k
        refine_out = refine_out or d_k
        self.x_chunks, self.scaled = x_chunks, scaled_attention
        d_x = query_width // x_chunks
        self.fields = nn.ModuleList(
            FieldAligner(d_k, refine_hidden, refine_out, d_x, k_chunks, n, m) for _ in range(n_fields))
        self.fusion = SelfAttention(m, heads)
        self.flat_width = n_fields * x_chunks * m
        self.output_proj = init_linear(nn.Linear(self.flat_width, out_width)) if out_width else None

    @property
    def out_width(self) -> int:
        return self.output_proj.out_features if self.output_proj is not None else self.flat_width

    def forward(self, kbar: torch.Tensor, query: torch.Tensor) -> dict:
        """``kbar`` (B, d_k, L), ``query`` (B, query_width)."""
        x_stacked = stack_chunks(query, self.x_chunks)
        outs, cross = [], []
        for j, aligner in enumerate(self.fields):
            o, s = aligner(x_stacked, kbar[:, :, j], self.scaled)
            outs.append(o)
            cross.append(s)
        fused, flat, self_scores = fuse_fields(outs, self.fusion)
        out = self.output_proj(flat) if self.output_proj is not None else flat
        return {"out": out, "flat": flat, "per_field": outs, "cross_scores": cross, "self_scores": self_scores}


class DenseProjection(nn.Module):
    """Stand-in for ESA in the no-alignment ablation: one affine map of vec(kbar)."""

    def __init__(self, d_k: int, n_fields: int, out_width: int):
        super().__init__()
        self.proj = init_linear(nn.Linear(d_k * n_fields, out_width))
        self.out_width = out_width

    def forward(self, kbar: torch.Tensor, query: torch.Tensor | None = None) -> dict:
        flat = kbar.transpose(1, 2).reshape(kbar.shape[0], -1)
        return {"out": self.proj(flat), "flat": flat, "per_field": [], "cross_scores": [], "self_scores": None}
