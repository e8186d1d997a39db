"""Answer decoder: causal self-attention, per-modality source attention,
multimodal fusion (concatenation or attentional), and the prediction head."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .encoder import EncodedStreams
from .layers import FeedForward, MultiHeadAttention, causal_mask, sinusoidal_encoding

MODALITIES = ("audio", "visual", "caption")


@dataclass
class DecoderConfig:
    M: int = 2
    d: int = 256
    ff: int = 1024
    heads: int = 4
    fusion_mode: str = "concat"      # "concat" | "attentional"
    use_caption: bool = False        # teacher reads the caption stream
    embed_dim: int = 300
    use_positional: bool = True

    def validate(self) -> None:
        if self.M <= 0:
            raise ValueError("DecoderConfig.M must be positive")
        for name in ("d", "ff", "heads", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DecoderConfig.{name} must be positive")
        if self.d % self.heads != 0:
            raise ValueError("DecoderConfig.d must be divisible by heads")
        if self.fusion_mode not in ("concat", "attentional"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")


@dataclass
class DecoderState:
    """Everything retained from one decoder forward pass.

    ``layer_states[m]`` is the full hidden sequence after m blocks (m=0 is
    the embedded input).  ``dists`` holds the next-word distribution at every
    position; ``dist`` is the final position's, i.e. the next word to emit.
    ``source_attention[(m, modality)]`` has shape (heads, T, T_frames).
    """

    layer_states: list[torch.Tensor]
    dists: torch.Tensor
    source_attention: dict[tuple[int, str], torch.Tensor] = field(default_factory=dict)
    fusion_weights: dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def dist(self) -> torch.Tensor:
        return self.dists[-1]


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig, d_a: int, d_v: int, d_c: int, dtype=torch.float64):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.ln_sa = nn.LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, d, cfg.heads, dtype)
        self.ln_src = nn.LayerNorm(d, dtype=dtype)
        self.ln_mem_a = nn.LayerNorm(d_a, dtype=dtype)
        self.ln_mem_v = nn.LayerNorm(d_v, dtype=dtype)
        self.src_a = MultiHeadAttention(d, d_a, cfg.heads, dtype)
        self.src_v = MultiHeadAttention(d, d_v, cfg.heads, dtype)
        if cfg.use_caption:
            self.ln_mem_c = nn.LayerNorm(d_c, dtype=dtype)
            self.src_c = MultiHeadAttention(d, d_c, cfg.heads, dtype)
        n_branches = 3 if cfg.use_caption else 2
        self.ln_ff = nn.LayerNorm(n_branches * d if cfg.fusion_mode == "concat" else d, dtype=dtype)
        if cfg.fusion_mode == "concat":
            self.ff = FeedForward(n_branches * d, cfg.ff, d, dtype=dtype)
        else:
            # attentional fusion: learned query/key maps, identity value path,
            # so equal branch vectors fuse to themselves
            self.fuse_q = nn.Linear(d, d, dtype=dtype)
            self.fuse_k = nn.Linear(d, d, bias=False, dtype=dtype)
            self.ff = FeedForward(d, cfg.ff, d, dtype=dtype)

    def forward(self, y: torch.Tensor, streams: EncodedStreams):
        """Returns (output, attn dict modality -> (H, T, T_frames), fusion weights or None)."""
        t = y.shape[0]
        h = self.ln_sa(y)
        y_bar = y + self.self_attn(h, h, h, mask=causal_mask(t))[0]
        q = self.ln_src(y_bar)
        attn: dict[str, torch.Tensor] = {}
        mem_a = self.ln_mem_a(streams.A)
        mem_v = self.ln_mem_v(streams.V)
        out_a, attn["audio"] = self.src_a(q, mem_a, mem_a)
        out_v, attn["visual"] = self.src_v(q, mem_v, mem_v)
        branches = [y_bar + out_a, y_bar + out_v]
        if self.cfg.use_caption:
            if streams.C is None:
                raise ValueError("decoder configured with use_caption but streams.C is absent")
            mem_c = self.ln_mem_c(streams.C)
            out_c, attn["caption"] = self.src_c(q, mem_c, mem_c)
            branches.append(y_bar + out_c)
        if self.cfg.fusion_mode == "concat":
            cat = torch.cat(branches, dim=1)
            # the concatenation is wider than the stream, so the residual is
            # carried by the branch mean rather than the concatenation itself
            y_out = torch.stack(branches).mean(dim=0) + self.ff(self.ln_ff(cat))
            return y_out, attn, None
        stacked = torch.stack(branches, dim=1)             # (T, B, d)
        logits = torch.einsum(
            "td,tbd->tb", self.fuse_q(y_bar), self.fuse_k(stacked)
        ) / (self.cfg.d ** 0.5)
        weights = torch.softmax(logits, dim=1)             # (T, B)
        fused = torch.einsum("tb,tbd->td", weights, stacked)
        y_out = fused + self.ff(self.ln_ff(fused))
        return y_out, attn, weights


class Decoder(nn.Module):
    """Embedding, M decoder blocks, and the linear+softmax prediction head."""

    def __init__(self, vocab_size: int, cfg: DecoderConfig, d_a: int, d_v: int,
                 d_c: int = 0, dtype=torch.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype_ = dtype
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.embed_dim, dtype=dtype)
        self.embed_proj = nn.Linear(cfg.embed_dim, cfg.d, dtype=dtype)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg, d_a, d_v, d_c, dtype) for _ in range(cfg.M)
        )
        self.ln_out = nn.LayerNorm(cfg.d, dtype=dtype)
        self.head = nn.Linear(cfg.d, vocab_size, dtype=dtype)

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Lookup, project to model width, add sinusoidal position terms."""
        if (token_ids < 0).any() or (token_ids >= self.vocab_size).any():
            raise ValueError("token id out of vocabulary range")
        x = self.embed_proj(self.embed(token_ids))
        if self.cfg.use_positional:
            x = x + sinusoidal_encoding(x.shape[0], x.shape[1], self.dtype_)
        return x

    def forward(self, token_ids: torch.Tensor, streams: EncodedStreams) -> DecoderState:
        y = self.embed_tokens(token_ids)
        state = DecoderState(layer_states=[y], dists=torch.empty(0))
        for m, block in enumerate(self.blocks, start=1):
            y, attn, fuse_w = block(y, streams)
            state.layer_states.append(y)
            for modality, w in attn.items():
                state.source_attention[(m, modality)] = w
            if fuse_w is not None:
                state.fusion_weights[m] = fuse_w
        logits = self.head(self.ln_out(y))
        state.dists = torch.softmax(logits, dim=-1)
        return state
