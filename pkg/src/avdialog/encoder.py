"""Bimodal audio-visual encoder and the teacher's caption encoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import FeatureSet
from .layers import FeedForward, MultiHeadAttention, sinusoidal_encoding


@dataclass
class EncoderConfig:
    N: int = 2
    D_a: int = 8          # raw audio feature width
    D_v: int = 16         # raw visual feature width
    d_a: int = 64
    d_v: int = 128
    ff_a: int = 256
    ff_v: int = 512
    heads: int = 4
    d_c: int = 256        # caption encoder width (teacher only)
    ff_c: int = 1024
    use_positional: bool = True

    def validate(self) -> None:
        for name in ("N",):
            if getattr(self, name) < 0:
                raise ValueError(f"EncoderConfig.{name} must be >= 0")
        for name in ("D_a", "D_v", "d_a", "d_v", "ff_a", "ff_v", "heads", "d_c", "ff_c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        for name in ("d_a", "d_v", "d_c"):
            if getattr(self, name) % self.heads != 0:
                raise ValueError(f"EncoderConfig.{name} must be divisible by heads")


@dataclass
class EncodedStreams:
    A: torch.Tensor                  # T_a x d_a
    V: torch.Tensor                  # T_v x d_v
    C: torch.Tensor | None = None    # T_c x d_c (teacher)
    frame_rate_audio: float = 1.0
    frame_rate_visual: float = 1.0
    duration: float = 0.0


class BimodalEncoderBlock(nn.Module):
    """Self-attention, cross-modal attention, feed-forward; all pre-norm residual.

    Each modality first self-attends, then queries the other modality's
    post-self-attention states, then passes through a pointwise feed-forward
    layer.  Output shapes equal input shapes.
    """

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        self.ln_sa_a = nn.LayerNorm(cfg.d_a, dtype=dtype)
        self.ln_sa_v = nn.LayerNorm(cfg.d_v, dtype=dtype)
        self.sa_a = MultiHeadAttention(cfg.d_a, cfg.d_a, cfg.heads, dtype)
        self.sa_v = MultiHeadAttention(cfg.d_v, cfg.d_v, cfg.heads, dtype)
        self.ln_ca_qa = nn.LayerNorm(cfg.d_a, dtype=dtype)
        self.ln_ca_kva = nn.LayerNorm(cfg.d_v, dtype=dtype)  # keys/values for audio query
        self.ln_ca_qv = nn.LayerNorm(cfg.d_v, dtype=dtype)
        self.ln_ca_kvv = nn.LayerNorm(cfg.d_a, dtype=dtype)
        self.ca_a = MultiHeadAttention(cfg.d_a, cfg.d_v, cfg.heads, dtype)
        self.ca_v = MultiHeadAttention(cfg.d_v, cfg.d_a, cfg.heads, dtype)
        self.ln_ff_a = nn.LayerNorm(cfg.d_a, dtype=dtype)
        self.ln_ff_v = nn.LayerNorm(cfg.d_v, dtype=dtype)
        self.ff_a = FeedForward(cfg.d_a, cfg.ff_a, dtype=dtype)
        self.ff_v = FeedForward(cfg.d_v, cfg.ff_v, dtype=dtype)

    def forward(self, a: torch.Tensor, v: torch.Tensor):
        xa = self.ln_sa_a(a)
        xv = self.ln_sa_v(v)
        a_bar = a + self.sa_a(xa, xa, xa)[0]
        v_bar = v + self.sa_v(xv, xv, xv)[0]
        a_tld = a_bar + self.ca_a(self.ln_ca_qa(a_bar), self.ln_ca_kva(v_bar), self.ln_ca_kva(v_bar))[0]
        v_tld = v_bar + self.ca_v(self.ln_ca_qv(v_bar), self.ln_ca_kvv(a_bar), self.ln_ca_kvv(a_bar))[0]
        a_out = a_tld + self.ff_a(self.ln_ff_a(a_tld))
        v_out = v_tld + self.ff_v(self.ln_ff_v(v_tld))
        return a_out, v_out


class AVEncoder(nn.Module):
    """Feature projection plus a stack of N bimodal encoder blocks."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype_ = dtype
        self.proj_a = nn.Linear(cfg.D_a, cfg.d_a, dtype=dtype)
        self.proj_v = nn.Linear(cfg.D_v, cfg.d_v, dtype=dtype)
        self.blocks = nn.ModuleList(BimodalEncoderBlock(cfg, dtype) for _ in range(cfg.N))
        self.ln_out_a = nn.LayerNorm(cfg.d_a, dtype=dtype)
        self.ln_out_v = nn.LayerNorm(cfg.d_v, dtype=dtype)

    def project(self, a0: torch.Tensor, v0: torch.Tensor):
        """Affine per-frame projection followed by sinusoidal position terms."""
        if a0.shape[1] != self.cfg.D_a or v0.shape[1] != self.cfg.D_v:
            raise ValueError(
                f"feature widths ({a0.shape[1]}, {v0.shape[1]}) do not match "
                f"configured ({self.cfg.D_a}, {self.cfg.D_v})"
            )
        a = self.proj_a(a0)
        v = self.proj_v(v0)
        if self.cfg.use_positional:
            a = a + sinusoidal_encoding(a.shape[0], a.shape[1], self.dtype_)
            v = v + sinusoidal_encoding(v.shape[0], v.shape[1], self.dtype_)
        return a, v

    def forward(self, a0: torch.Tensor, v0: torch.Tensor):
        a, v = self.project(a0, v0)
        for block in self.blocks:
            a, v = block(a, v)
        if self.blocks:
            a, v = self.ln_out_a(a), self.ln_out_v(v)
        return a, v

    def encode(self, features: FeatureSet) -> EncodedStreams:
        a0 = torch.as_tensor(features.audio, dtype=self.dtype_)
        v0 = torch.as_tensor(features.visual, dtype=self.dtype_)
        a, v = self.forward(a0, v0)
        return EncodedStreams(
            A=a, V=v,
            frame_rate_audio=features.frame_rate_audio,
            frame_rate_visual=features.frame_rate_visual,
            duration=features.duration,
        )


class CaptionEncoderBlock(nn.Module):
    def __init__(self, d: int, ff: int, heads: int, dtype=torch.float64):
        super().__init__()
        self.ln_sa = nn.LayerNorm(d, dtype=dtype)
        self.sa = MultiHeadAttention(d, d, heads, dtype)
        self.ln_ff = nn.LayerNorm(d, dtype=dtype)
        self.ff = FeedForward(d, ff, dtype=dtype)

    def forward(self, x):
        h = self.ln_sa(x)
        x = x + self.sa(h, h, h)[0]
        return x + self.ff(self.ln_ff(x))


class CaptionEncoder(nn.Module):
    """Unimodal self-attention encoder for the teacher's caption text."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig, embed_dim: int = 300,
                 dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype_ = dtype
        self.embed = nn.Embedding(vocab_size, embed_dim, dtype=dtype)
        self.proj = nn.Linear(embed_dim, cfg.d_c, dtype=dtype)
        self.blocks = nn.ModuleList(
            CaptionEncoderBlock(cfg.d_c, cfg.ff_c, cfg.heads, dtype) for _ in range(cfg.N)
        )
        self.ln_out = nn.LayerNorm(cfg.d_c, dtype=dtype)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.numel() == 0:
            raise ValueError("caption must be non-empty")
        x = self.proj(self.embed(token_ids))
        if self.cfg.use_positional:
            x = x + sinusoidal_encoding(x.shape[0], x.shape[1], self.dtype_)
        for block in self.blocks:
            x = block(x)
        if self.blocks:
            x = self.ln_out(x)
        return x
