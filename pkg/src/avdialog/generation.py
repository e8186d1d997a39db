"""Greedy search, beam search, and log-domain ensembling of two decoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .encoder import EncodedStreams
from .model import AVSDModel

_LOG_FLOOR = 1e-12

# maps the generated-so-far token ids to the next-word distribution
StepFn = Callable[[list[int]], torch.Tensor]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]          # generated ids, including <eos> when finished
    log_prob: float
    finished: bool

    def score(self, length_normalize: bool) -> float:
        if length_normalize and self.tokens:
            return self.log_prob / len(self.tokens)
        return self.log_prob

    def answer(self, eos_id: int) -> list[int]:
        return [t for t in self.tokens if t != eos_id]


def make_step(model: AVSDModel, context_ids: Sequence[int], streams: EncodedStreams) -> StepFn:
    def step(generated: list[int]) -> torch.Tensor:
        with torch.no_grad():
            return model.next_word_distribution(list(context_ids) + generated, streams).dist
    return step


def make_ensemble_step(
    models: Sequence[AVSDModel],
    context_ids: Sequence[int],
    streams_list: Sequence[EncodedStreams],
) -> StepFn:
    steps = [make_step(m, context_ids, s) for m, s in zip(models, streams_list, strict=True)]

    def step(generated: list[int]) -> torch.Tensor:
        return ensemble_next_distribution([s(generated) for s in steps])
    return step


def ensemble_next_distribution(dists: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average the distributions in the log domain and renormalize.

    Equal weights; this is the normalized geometric mean of the inputs.
    """
    sizes = {d.shape[0] for d in dists}
    if len(sizes) != 1:
        raise ValueError(f"vocabulary sizes differ: {sorted(sizes)}")
    logs = torch.stack([torch.log(d.clamp_min(_LOG_FLOOR)) for d in dists])
    return torch.softmax(logs.mean(dim=0), dim=0)


def beam_search(
    step: StepFn,
    eos_id: int,
    beam: int = 5,
    max_len: int = 20,
    length_normalize: bool = True,
) -> list[Hypothesis]:
    """Standard beam search over summed next-word log probabilities.

    Finished hypotheses retire into a completed pool; ties are broken by
    token id, then by the order of the hypotheses being extended.  The pool
    is returned sorted by (optionally length-normalized) score.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [Hypothesis((), 0.0, False)]
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        candidates: list[tuple[float, int, int, Hypothesis]] = []
        for h_idx, hyp in enumerate(live):
            log_p = torch.log(step(list(hyp.tokens)).clamp_min(_LOG_FLOOR))
            for tok in range(log_p.shape[0]):
                candidates.append((hyp.log_prob + float(log_p[tok]), tok, h_idx, hyp))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, tok, _, hyp in candidates[:beam]:
            new = Hypothesis(hyp.tokens + (tok,), score, tok == eos_id)
            (completed if new.finished else next_live).append(new)
        live = next_live
        if not live:
            break
    completed.extend(Hypothesis(h.tokens, h.log_prob, False) for h in live)
    completed.sort(key=lambda h: (-h.score(length_normalize), h.tokens))
    return completed


def greedy_decode(step: StepFn, eos_id: int, max_len: int = 20) -> list[int]:
    """Repeatedly append the argmax token; ties break toward the lowest id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out: list[int] = []
    for _ in range(max_len):
        dist = step(out)
        tok = int(torch.argmax(dist))
        if tok == eos_id:
            break
        out.append(tok)
    return out


def generate_answer(
    model: AVSDModel,
    context_ids: Sequence[int],
    streams: EncodedStreams,
    beam: int = 5,
    max_len: int = 20,
    length_normalize: bool = True,
) -> list[int]:
    """One-best answer ids (without <eos>) for a single turn."""
    step = make_step(model, context_ids, streams)
    eos = model.vocab.eos_id
    if beam == 1:
        return greedy_decode(step, eos, max_len)
    hyps = beam_search(step, eos, beam, max_len, length_normalize)
    return hyps[0].answer(eos)
