"""Temporal evidence localization: attention moments and a 1-D region
proposal network over encoder outputs concatenated with a pooled QA vector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .data import TimeRegion
from .decoder import DecoderState
from .encoder import EncodedStreams
from .metrics import iou_interval

_EVIDENCE_MODALITIES = ("audio", "visual")


@dataclass
class ReasoningConfig:
    nu: float = 1.0
    confidence_threshold: float = 0.5
    kernel_sizes: tuple[int, ...] = (1, 3, 5, 7, 9, 11, 15, 21, 31, 41)
    rpn_width: int = 256
    rpn_depth: int = 3
    nms_iou: float = 0.5

    def validate(self) -> None:
        if self.nu < 0:
            raise ValueError("nu must be >= 0")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        for k in self.kernel_sizes:
            if k <= 0 or k % 2 == 0:
                raise ValueError("kernel sizes must be odd and positive")


# ---------------------------------------------------------------------------
# attention-moment method
# ---------------------------------------------------------------------------

@dataclass
class AttentionTrace:
    """Source-attention rows for the answer positions of one turn.

    ``rows[modality]`` has shape (n_rows, T_frames) where rows enumerate
    (layer, head, answer position); each row sums to 1.
    """

    rows: dict[str, np.ndarray]
    frame_rates: dict[str, float]

    @classmethod
    def from_state(cls, state: DecoderState, answer_positions: list[int],
                   streams: EncodedStreams) -> "AttentionTrace":
        rows: dict[str, list[np.ndarray]] = {m: [] for m in _EVIDENCE_MODALITIES}
        for (_, modality), w in sorted(state.source_attention.items()):
            if modality not in rows:
                continue
            arr = w.detach().numpy()[:, answer_positions, :]  # (H, P, T)
            rows[modality].extend(arr.reshape(-1, arr.shape[-1]))
        return cls(
            rows={m: np.array(v) for m, v in rows.items() if v},
            frame_rates={"audio": streams.frame_rate_audio,
                         "visual": streams.frame_rate_visual},
        )

    def is_empty(self) -> bool:
        return not any(r.size for r in self.rows.values())


def attention_region(trace: AttentionTrace, nu: float, duration: float) -> TimeRegion:
    """Single evidence region [mu - nu*sigma, mu + nu*sigma], clamped to the video.

    All rows are averaged uniformly -- over layers, heads, modalities, and
    answer positions -- as a mixture of discrete distributions on each
    modality's frame times (frame t sits at t / frame_rate seconds), which
    places every modality on one common time axis before taking moments.
    """
    if trace.is_empty():
        raise ValueError("attention trace is empty")
    times, weights = [], []
    n_rows = sum(r.shape[0] for r in trace.rows.values())
    for modality, rows in trace.rows.items():
        rate = trace.frame_rates[modality]
        t = np.arange(rows.shape[1]) / rate
        w = rows.sum(axis=0) / n_rows
        times.append(t)
        weights.append(w)
    t = np.concatenate(times)
    w = np.concatenate(weights)
    w = w / w.sum()
    mu = float(np.dot(w, t))
    sigma = float(math.sqrt(max(0.0, np.dot(w, (t - mu) ** 2))))
    return TimeRegion(max(0.0, mu - nu * sigma), min(duration, mu + nu * sigma))


def pool_qa_embedding(state: DecoderState, positions: list[int] | None = None) -> torch.Tensor:
    """Mean of the final-layer decoder hidden vectors over the QA positions."""
    final = state.layer_states[-1]
    if positions is not None:
        final = final[positions]
    return final.mean(dim=0)


# ---------------------------------------------------------------------------
# region proposal network
# ---------------------------------------------------------------------------

@dataclass
class RawProposals:
    """Raw per-frame head outputs of one conv branch (kept as tensors so the
    training loss can backpropagate through them)."""

    modality: str
    kernel: int
    frame_rate: float
    outputs: torch.Tensor    # (3, T): center offset, log-length, confidence logit


@dataclass
class Proposal:
    region: TimeRegion
    modality: str
    kernel: int
    frame: int

    @property
    def confidence(self) -> float:
        return self.region.confidence


class RegionProposalNetwork(nn.Module):
    """Per-modality Conv1D branches, one per kernel size.

    Every frame of the encoded stream is concatenated with the pooled QA
    vector; each branch applies ``rpn_depth`` same-padded convolutions with
    ReLU between, then a pointwise head emitting (delta-center, log-length,
    confidence logit) per frame.
    """

    def __init__(self, d_a: int, d_v: int, d_qa: int, config: ReasoningConfig,
                 dtype=torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.branches = nn.ModuleDict()
        for modality, d_mod in (("audio", d_a), ("visual", d_v)):
            for k in config.kernel_sizes:
                layers: list[nn.Module] = []
                c_in = d_mod + d_qa
                for _ in range(config.rpn_depth):
                    layers.append(nn.Conv1d(c_in, config.rpn_width, k, padding=k // 2, dtype=dtype))
                    layers.append(nn.ReLU())
                    c_in = config.rpn_width
                layers.append(nn.Conv1d(c_in, 3, 1, dtype=dtype))
                self.branches[f"{modality}_{k}"] = nn.Sequential(*layers)

    def forward(self, streams: EncodedStreams, qa: torch.Tensor) -> list[RawProposals]:
        raw = []
        for modality, enc, rate in (
            ("audio", streams.A, streams.frame_rate_audio),
            ("visual", streams.V, streams.frame_rate_visual),
        ):
            x = torch.cat([enc, qa.unsqueeze(0).expand(enc.shape[0], -1)], dim=1)
            x = x.T.unsqueeze(0)  # (1, C, T)
            for k in self.config.kernel_sizes:
                if enc.shape[0] < k:
                    continue  # branch undefined for streams shorter than its kernel
                out = self.branches[f"{modality}_{k}"](x)[0]  # (3, T)
                raw.append(RawProposals(modality, k, rate, out))
        return raw


def decode_proposals(raw: list[RawProposals], duration: float) -> list[Proposal]:
    """Map raw head outputs to time regions with confidences.

    Anchor at frame t with kernel k spans k frame periods centered on the
    frame time t / rate; the head shifts the center by up to half a frame
    period and scales the length by exp(log-length).
    """
    proposals = []
    for branch in raw:
        fp = 1.0 / branch.frame_rate
        dc, dl, logit = branch.outputs.detach().numpy()
        for t in range(branch.outputs.shape[1]):
            center = (t + _sigmoid(dc[t]) - 0.5) * fp
            length = branch.kernel * math.exp(dl[t]) * fp
            conf = _sigmoid(logit[t])
            start = min(max(0.0, center - length / 2), duration)
            end = min(max(start, center + length / 2), duration)
            proposals.append(Proposal(TimeRegion(start, end, conf), branch.modality,
                                      branch.kernel, t))
    return proposals


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def encode_targets(frame: int, kernel: int, frame_rate: float,
                   gt: TimeRegion) -> tuple[float, float]:
    """Invert the proposal decode map for one anchor and one target region."""
    fp = 1.0 / frame_rate
    center = (gt.start + gt.end) / 2
    u = center / fp - frame + 0.5
    u = min(max(u, 1e-3), 1.0 - 1e-3)   # anchors can only shift within one frame
    dc = math.log(u / (1.0 - u))
    dl = math.log(max(gt.length, 1e-9) / (kernel * fp))
    return dc, dl


def _anchor_region(frame: int, kernel: int, frame_rate: float) -> TimeRegion:
    fp = 1.0 / frame_rate
    center = frame * fp
    half = kernel * fp / 2
    return TimeRegion(max(0.0, center - half), center + half)


def rpn_train_step(raw: list[RawProposals], gt_regions: list[TimeRegion],
                   pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Anchor-matching loss: BCE on confidence for positives and negatives,
    smooth-L1 on (delta-center, log-length) for positives.

    The confidence BCE averages positives and negatives separately (equal
    weight); with one positive anchor among hundreds of negatives a plain
    mean would drown the positive term and collapse all confidences to zero.

    Returns (loss tensor, stats).  With no positive anchors the loss reduces
    to the negative confidence term and ``stats['no_positives']`` is set.
    """
    if not gt_regions:
        raise ValueError("at least one ground-truth region required")
    pos_logits, neg_logits = [], []
    reg_pred, reg_target = [], []
    for branch in raw:
        for t in range(branch.outputs.shape[1]):
            anchor = _anchor_region(t, branch.kernel, branch.frame_rate)
            ious = [iou_interval(anchor, g) for g in gt_regions]
            best = max(ious)
            if best >= pos_iou:
                gt = gt_regions[ious.index(best)]
                dc, dl = encode_targets(t, branch.kernel, branch.frame_rate, gt)
                pos_logits.append(branch.outputs[2, t])
                reg_pred.append(branch.outputs[:2, t])
                reg_target.append(torch.tensor([dc, dl], dtype=branch.outputs.dtype))
            elif best < neg_iou:
                neg_logits.append(branch.outputs[2, t])
            # anchors in between are ignored
    bce = nn.functional.binary_cross_entropy_with_logits
    loss = None
    for logits, label in ((pos_logits, 1.0), (neg_logits, 0.0)):
        if not logits:
            continue
        logit_t = torch.stack(logits)
        term = bce(logit_t, torch.full_like(logit_t, label))
        loss = term if loss is None else loss + term
    stats = {"positives": len(pos_logits), "negatives": len(neg_logits),
             "no_positives": not reg_pred}
    if reg_pred:
        loss = loss + nn.functional.smooth_l1_loss(torch.stack(reg_pred),
                                                   torch.stack(reg_target))
    return loss, stats


def rpn_dims(model) -> dict:
    return {"d_a": model.enc_cfg.d_a, "d_v": model.enc_cfg.d_v, "d_qa": model.dec_cfg.d}


def save_rpn_checkpoint(rpn: RegionProposalNetwork, dims: dict, path) -> None:
    from dataclasses import asdict

    from .model import write_container

    meta = {"kind": "rpn", "dims": dims,
            "config": {**asdict(rpn.config), "kernel_sizes": list(rpn.config.kernel_sizes)}}
    write_container(path, meta, dict(rpn.state_dict()))


def load_rpn_checkpoint(path, dtype=torch.float64) -> RegionProposalNetwork:
    from .model import read_container

    header, state = read_container(path, dtype)
    if header.get("kind") != "rpn":
        raise ValueError(f"{path}: container does not hold an RPN")
    cfg = ReasoningConfig(**{**header["config"],
                             "kernel_sizes": tuple(header["config"]["kernel_sizes"])})
    dims = header["dims"]
    rpn = RegionProposalNetwork(dims["d_a"], dims["d_v"], dims["d_qa"], cfg, dtype)
    rpn.load_state_dict(state)
    return rpn


# ---------------------------------------------------------------------------
# per-turn localization and RPN training
# ---------------------------------------------------------------------------

def localize_attention(model, features, context_ids: list[int], answer_ids: list[int],
                       nu: float) -> TimeRegion:
    """Attention-moment evidence region for one (context, answer) pair."""
    streams = model.encode(features)
    tokens = context_ids + answer_ids
    with torch.no_grad():
        state = model.forward(torch.tensor(tokens, dtype=torch.long), streams)
    first = len(context_ids) - 1
    positions = list(range(first, first + max(1, len(answer_ids))))
    trace = AttentionTrace.from_state(state, positions, streams)
    return attention_region(trace, nu, features.duration)


def localize_rpn(rpn: RegionProposalNetwork, model, features, context_ids: list[int],
                 answer_ids: list[int], config: ReasoningConfig) -> list[TimeRegion]:
    with torch.no_grad():
        streams = model.encode(features)
        state = model.forward(torch.tensor(context_ids + answer_ids, dtype=torch.long),
                              streams)
        qa = pool_qa_embedding(state)
        raw = rpn(streams, qa)
    proposals = decode_proposals(raw, features.duration)
    return filter_proposals(proposals, config.confidence_threshold, config.nms_iou)


def train_rpn(rpn: RegionProposalNetwork, model, corpus, vocab, epochs: int = 20,
              learning_rate: float = 1e-3, batch_size: int = 8, seed: int = 0,
              history_policy: str = "previous_question_only") -> list[dict]:
    """Fit the RPN on ground-truth regions; the dialog model stays frozen."""
    import random as _random

    from .training import make_items

    torch.manual_seed(seed)
    items = [it for it in make_items(corpus, vocab, history_policy)
             if it.sample.reasons is not None and it.sample.reasons[it.turn_index]]
    if not items:
        raise ValueError("corpus has no ground-truth reason regions")
    # encoder outputs and QA embeddings are fixed inputs; compute them once
    cache = []
    with torch.no_grad():
        for it in items:
            features = corpus.features[it.sample.video_id]
            streams = model.encode(features)
            tokens = it.context_ids + it.target_ids[:-1]
            state = model.forward(torch.tensor(tokens, dtype=torch.long), streams)
            cache.append((streams, pool_qa_embedding(state),
                          list(it.sample.reasons[it.turn_index])))
    opt = torch.optim.Adam(rpn.parameters(), lr=learning_rate)
    rng = _random.Random(seed)
    log = []
    for epoch in range(1, epochs + 1):
        order = list(range(len(cache)))
        rng.shuffle(order)
        total, n_batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            opt.zero_grad()
            loss = None
            for i in order[start : start + batch_size]:
                streams, qa, gt = cache[i]
                step_loss, _ = rpn_train_step(rpn(streams, qa), gt)
                loss = step_loss if loss is None else loss + step_loss
            loss.backward()
            opt.step()
            total += float(loss.detach())
            n_batches += 1
        log.append({"epoch": epoch, "train_loss": total / max(1, n_batches)})
    return log


def filter_proposals(proposals: list[Proposal], threshold: float,
                     nms_iou: float = 0.5) -> list[TimeRegion]:
    """Confidence threshold, then greedy NMS (highest confidence first)."""
    kept = [p.region for p in proposals if p.region.confidence >= threshold]
    kept.sort(key=lambda r: (-r.confidence, r.start, r.end))
    out: list[TimeRegion] = []
    for region in kept:
        if all(iou_interval(region, r) < nms_iou for r in out):
            out.append(region)
    return out
