"""Chunk-gated knowledge filtering.

A small gate network looks at the (flattened) knowledge matrix together with
the detached feature embedding and emits one weight in ``(0, kappa)`` per
chunk per knowledge field. Every element of a chunk is scaled by that weight.

Tensors are batched: knowledge ``(B, d_k, L)``, features ``(B, d_e)``,
weights ``(B, C, L)``.
"""
from __future__ import annotations

import math

import torch
from torch import nn


def flatten_columns(k: torch.Tensor) -> torch.Tensor:
    """Column-wise flatten of ``(B, d_k, L)``: all of field 0, then field 1, ..."""
    return k.transpose(1, 2).reshape(k.shape[0], -1)


def gate_input(k: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
    if feat.ndim != 2 or feat.shape[1] < 1:
        raise ValueError("feature embedding must be a non-empty (B, d_e) tensor")
    if feat.shape[0] != k.shape[0]:
        raise ValueError(f"batch mismatch: knowledge {k.shape[0]} vs features {feat.shape[0]}")
    return torch.cat([flatten_columns(k), feat.detach()], dim=1)


def gate_weights(z: torch.Tensor, W1, b1, W2, b2, n_chunks: int, n_fields: int,
                 kappa: float = 2.0) -> torch.Tensor:
    """``kappa * sigmoid(relu(z W1 + b1) W2 + b2)`` reshaped field-major to (B, C, L)."""
    if z.shape[1] != W1.shape[0]:
        raise ValueError(f"gate input width {z.shape[1]} != W1 rows {W1.shape[0]}")
    if W2.shape[1] != n_chunks * n_fields:
        raise ValueError(f"W2 has {W2.shape[1]} outputs, expected C*L={n_chunks * n_fields}")
    out = kappa * torch.sigmoid(torch.relu(z @ W1 + b1) @ W2 + b2)
    # output index j*C + c -> weight for chunk c of field j
    return out.reshape(-1, n_fields, n_chunks).transpose(1, 2)


def apply_weights(k: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    d_k, C = k.shape[1], w.shape[1]
    if w.shape[2] != k.shape[2] or d_k % C:
        raise ValueError(f"weights {tuple(w.shape)} incompatible with knowledge {tuple(k.shape)}")
    return k * w.repeat_interleave(d_k // C, dim=1)


def default_hidden(in_width: int) -> int:
    return max(16, in_width // 4)


class ESFNet(nn.Module):
    def __init__(self, d_k: int, n_fields: int, feat_width: int, n_chunks: int = 4,
                 kappa: float = 2.0, hidden: int | None = None):
        super().__init__()
        if d_k % n_chunks:
            raise ValueError(f"d_k={d_k} must be divisible by the number of chunks C={n_chunks}")
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        in_width = d_k * n_fields + feat_width
        hidden = hidden or default_hidden(in_width)
        self.n_chunks, self.n_fields, self.kappa = n_chunks, n_fields, kappa
        self.W1 = nn.Parameter(torch.empty(in_width, hidden))
        self.b1 = nn.Parameter(torch.empty(hidden))
        self.W2 = nn.Parameter(torch.zeros(hidden, n_chunks * n_fields))
        self.b2 = nn.Parameter(torch.zeros(n_chunks * n_fields))
        bound = 1 / math.sqrt(in_width)
        nn.init.uniform_(self.W1, -bound, bound)
        nn.init.uniform_(self.b1, -bound, bound)

    def weights(self, k: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        z = gate_input(k, feat)
        return gate_weights(z, self.W1, self.b1, self.W2, self.b2, self.n_chunks, self.n_fields, self.kappa)

    def forward(self, k: torch.Tensor, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = self.weights(k, feat)
        return apply_weights(k, w), w
