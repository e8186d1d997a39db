"""Shared transformer building blocks (unbatched, float64 by default).

All modules operate on single sequences shaped (T, d); desk-scale batches
are handled by looping, which keeps the forward pass easy to verify.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class AttentionMaskError(RuntimeError):
    """Every key masked out for some query row."""


def sinusoidal_encoding(length: int, width: int, dtype=torch.float64) -> torch.Tensor:
    """Standard fixed sin/cos positional table, shape (length, width)."""
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    dim = torch.arange(0, width, 2, dtype=dtype)
    div = torch.exp(-dim * math.log(10000.0) / width)
    pe = torch.zeros(length, width, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: width // 2])
    return pe


def causal_mask(t: int) -> torch.Tensor:
    """Boolean (t, t) mask, True where attention is allowed."""
    return torch.tril(torch.ones(t, t, dtype=torch.bool))


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention over (T, d) sequences.

    The query and key/value streams may have different widths (cross-modal
    attention); the internal attention width equals the query width.  Returns
    both the output sequence and the per-head weights so downstream temporal
    reasoning can inspect them.
    """

    def __init__(self, d_q: int, d_kv: int, heads: int, dtype=torch.float64):
        super().__init__()
        if d_q % heads != 0:
            raise ValueError(f"width {d_q} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_q // heads
        self.w_q = nn.Linear(d_q, d_q, dtype=dtype)
        # a key bias shifts every logit in a query row equally, which softmax
        # ignores; leaving it in gives parameters with identically zero gradient
        self.w_k = nn.Linear(d_kv, d_q, bias=False, dtype=dtype)
        self.w_v = nn.Linear(d_kv, d_q, dtype=dtype)
        self.w_o = nn.Linear(d_q, d_q, dtype=dtype)

    def forward(self, q, k, v, mask: torch.Tensor | None = None):
        t_q, t_k = q.shape[0], k.shape[0]
        qh = self.w_q(q).view(t_q, self.heads, self.d_head).transpose(0, 1)
        kh = self.w_k(k).view(t_k, self.heads, self.d_head).transpose(0, 1)
        vh = self.w_v(v).view(t_k, self.heads, self.d_head).transpose(0, 1)
        logits = qh @ kh.transpose(1, 2) / math.sqrt(self.d_head)  # (H, Tq, Tk)
        if mask is not None:
            if mask.shape != (t_q, t_k):
                raise ValueError(f"mask shape {tuple(mask.shape)} != ({t_q}, {t_k})")
            if not mask.any(dim=1).all():
                raise AttentionMaskError("a query row has every key masked")
            logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ vh).transpose(0, 1).reshape(t_q, -1)
        return self.w_o(out), weights


class FeedForward(nn.Module):
    """Two-layer pointwise network with ReLU, mapping d_in -> d_out."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int | None = None, dtype=torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, dtype=dtype)
        self.fc2 = nn.Linear(d_hidden, d_out or d_in, dtype=dtype)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def init_parameters(module: nn.Module, seed: int) -> None:
    """Uniform init scaled by 1/sqrt(fan_in); biases zero; embedding N(0, 1)/sqrt(dim)."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0 / math.sqrt(m.embedding_dim), generator=gen)
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
