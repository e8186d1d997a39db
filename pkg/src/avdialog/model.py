"""Full answerer model (encoder + decoder) and its checkpoint container.

Checkpoints are a deterministic binary container: magic ``AVCK``, uint32
header length, a JSON header (configs, vocabulary, tensor directory), then
the little-endian float64 tensor payload in directory order.  Byte-identical
for identical parameters, which the determinism contract relies on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import FeatureSet
from .decoder import Decoder, DecoderConfig, DecoderState
from .encoder import AVEncoder, CaptionEncoder, EncodedStreams, EncoderConfig
from .layers import init_parameters
from .vocab import Vocabulary

_CKPT_MAGIC = b"AVCK"
_CKPT_VERSION = 1


class AVSDModel(nn.Module):
    """Audio-visual dialog answerer; the teacher variant also reads captions."""

    def __init__(self, vocab: Vocabulary, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.dtype_ = dtype
        self.encoder = AVEncoder(enc_cfg, dtype)
        self.caption_encoder = (
            CaptionEncoder(len(vocab), enc_cfg, dec_cfg.embed_dim, dtype)
            if dec_cfg.use_caption else None
        )
        self.decoder = Decoder(
            len(vocab), dec_cfg, enc_cfg.d_a, enc_cfg.d_v,
            enc_cfg.d_c if dec_cfg.use_caption else 0, dtype,
        )
        init_parameters(self, seed)

    @property
    def is_teacher(self) -> bool:
        return self.dec_cfg.use_caption

    def encode(self, features: FeatureSet, caption_ids: list[int] | None = None) -> EncodedStreams:
        streams = self.encoder.encode(features)
        if self.caption_encoder is not None:
            if not caption_ids:
                raise ValueError("teacher model requires a caption")
            streams.C = self.caption_encoder(torch.tensor(caption_ids, dtype=torch.long))
        return streams

    def forward(self, token_ids: torch.Tensor, streams: EncodedStreams) -> DecoderState:
        return self.decoder(token_ids, streams)

    def next_word_distribution(self, context_ids: list[int], streams: EncodedStreams) -> DecoderState:
        return self.forward(torch.tensor(context_ids, dtype=torch.long), streams)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def write_container(path: Path, meta: dict, state: dict[str, torch.Tensor]) -> None:
    """Write an arbitrary parameter set plus metadata to the container format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = dict(meta, version=_CKPT_VERSION, tensors=directory)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))


def read_container(path: Path, dtype=torch.float64) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (header_len,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + header_len].decode())
    if header["version"] != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    base = 8 + header_len
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", offset=base + entry["offset"], count=count)
        state[entry["name"]] = torch.tensor(arr.reshape(shape), dtype=dtype)
    return header, state


def save_checkpoint(model: AVSDModel, path: Path) -> None:
    meta = {
        "kind": "avsd_model",
        "encoder": asdict(model.enc_cfg),
        "decoder": asdict(model.dec_cfg),
        "vocab": model.vocab.tokens(),
    }
    write_container(path, meta, dict(model.state_dict()))


def load_checkpoint(path: Path, dtype=torch.float64) -> AVSDModel:
    header, state = read_container(path, dtype)
    if header.get("kind") != "avsd_model":
        raise ValueError(f"{path}: container does not hold a dialog model")
    vocab = Vocabulary(t for t in header["vocab"][4:])
    model = AVSDModel(vocab, EncoderConfig(**header["encoder"]), DecoderConfig(**header["decoder"]),
                      dtype=dtype)
    model.load_state_dict(state)
    return model
