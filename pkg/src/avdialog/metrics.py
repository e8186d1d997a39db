"""Answer-quality metrics (BLEU4, ROUGE_L, CIDEr-D) and region-overlap
metrics (interval IoU, IoU-1, IoU-2).

The text metrics follow the public MS COCO caption scorer numerically:
corpus-level BLEU with clipped counts, closest-reference brevity penalty and
no smoothing; ROUGE_L as an LCS F-measure with beta=1.2 taking the max
precision and recall over references; CIDEr-D with n=1..4, a Gaussian length
penalty (sigma=6) and a final x10 scale.  METEOR is reported as "n/a".
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .data import TimeRegion
from .vocab import tokenize

_TINY = 1e-15
_SMALL = 1e-9


@dataclass
class ScoreReport:
    corpus: dict[str, float] = field(default_factory=dict)
    per_sample: dict[str, dict] = field(default_factory=dict)

    def table(self) -> str:
        width = max((len(k) for k in self.corpus), default=6)
        lines = [f"{name:<{width}}  " +
                 (f"{value:.4f}" if isinstance(value, float) else str(value))
                 for name, value in self.corpus.items()]
        return "\n".join(lines)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tok(sentence) -> list[str]:
    return tokenize(sentence) if isinstance(sentence, str) else list(sentence)


# ---------------------------------------------------------------------------
# BLEU4
# ---------------------------------------------------------------------------

def bleu4(candidates: dict, references: dict) -> float:
    """Corpus-level BLEU over 1..4-grams with uniform weights."""
    if not candidates:
        raise ValueError("empty candidate set")
    max_n = 4
    correct = [0] * max_n
    guess = [0] * max_n
    test_len = 0
    ref_len = 0
    for key, cand in candidates.items():
        cand_toks = _tok(cand)
        ref_toks = [_tok(r) for r in references[key]]
        test_len += len(cand_toks)
        ref_len += min((abs(len(r) - len(cand_toks)), len(r)) for r in ref_toks)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand_toks, n)
            max_ref: Counter = Counter()
            for r in ref_toks:
                for gram, c in _ngrams(r, n).items():
                    max_ref[gram] = max(max_ref[gram], c)
            guess[n - 1] += max(len(cand_toks) - n + 1, 0)
            correct[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
    bleu = 1.0
    for n in range(max_n):
        bleu *= (correct[n] + _TINY) / (guess[n] + _SMALL)
    score = bleu ** (1.0 / max_n)
    ratio = (test_len + _TINY) / (ref_len + _SMALL)
    if ratio < 1.0:
        score *= math.exp(1.0 - 1.0 / ratio)
    return score


# ---------------------------------------------------------------------------
# ROUGE_L
# ---------------------------------------------------------------------------

def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates: dict, references: dict, beta: float = 1.2) -> float:
    if not candidates:
        raise ValueError("empty candidate set")
    scores = []
    for key, cand in candidates.items():
        cand_toks = _tok(cand)
        precisions, recalls = [], []
        for ref in references[key]:
            ref_toks = _tok(ref)
            lcs = _lcs_length(ref_toks, cand_toks)
            precisions.append(lcs / len(cand_toks) if cand_toks else 0.0)
            recalls.append(lcs / len(ref_toks) if ref_toks else 0.0)
        p, r = max(precisions), max(recalls)
        if p != 0 and r != 0:
            scores.append(((1 + beta**2) * p * r) / (r + beta**2 * p))
        else:
            scores.append(0.0)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def cider_d(candidates: dict, references: dict, sigma: float = 6.0) -> float:
    """CIDEr-D: tf-idf n-gram cosine with count clipping and length penalty.

    Document frequencies come from the reference corpus; with fewer than two
    videos every idf is zero and the score degenerates to 0 (a warning case
    flagged by callers).
    """
    if not candidates:
        raise ValueError("empty candidate set")
    max_n = 4
    doc_freq: dict = defaultdict(float)
    for key in candidates:
        seen = set()
        for ref in references[key]:
            toks = _tok(ref)
            for n in range(1, max_n + 1):
                seen.update(_ngrams(toks, n).keys())
        for gram in seen:
            doc_freq[gram] += 1
    log_corpus = math.log(float(len(candidates)))

    def counts_to_vec(toks):
        vec = [defaultdict(float) for _ in range(max_n)]
        norm = [0.0] * max_n
        length = 0
        for n in range(1, max_n + 1):
            for gram, freq in _ngrams(toks, n).items():
                idf = log_corpus - math.log(max(1.0, doc_freq[gram]))
                vec[n - 1][gram] = freq * idf
                norm[n - 1] += vec[n - 1][gram] ** 2
                if n == 2:
                    length += freq
        return vec, [math.sqrt(x) for x in norm], length

    def sim(v_c, n_c, l_c, v_r, n_r, l_r):
        delta = float(l_c - l_r)
        val = [0.0] * max_n
        for n in range(max_n):
            for gram, x in v_c[n].items():
                val[n] += min(x, v_r[n][gram]) * v_r[n][gram]
            if n_c[n] != 0 and n_r[n] != 0:
                val[n] /= n_c[n] * n_r[n]
            val[n] *= math.exp(-(delta**2) / (2 * sigma**2))
        return val

    scores = []
    for key, cand in candidates.items():
        v_c, n_c, l_c = counts_to_vec(_tok(cand))
        acc = [0.0] * max_n
        refs = references[key]
        for ref in refs:
            v_r, n_r, l_r = counts_to_vec(_tok(ref))
            for n, v in enumerate(sim(v_c, n_c, l_c, v_r, n_r, l_r)):
                acc[n] += v
        scores.append(10.0 * sum(acc) / max_n / len(refs))
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# temporal IoU metrics
# ---------------------------------------------------------------------------

def iou_interval(a: TimeRegion, b: TimeRegion) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0.0:
        # both zero-length: identical points count as a perfect match
        return 1.0 if (a.start == b.start and a.end == b.end) else 0.0
    return inter / union


def iou1(predicted: list[TimeRegion], ground_truth: list[TimeRegion]) -> float:
    """Average, over ground truths, of the best interval IoU to any prediction."""
    if not ground_truth:
        raise ValueError("ground_truth must be non-empty")
    per_gt = [max((iou_interval(p, g) for p in predicted), default=0.0)
              for g in ground_truth]
    return sum(per_gt) / len(per_gt)


def _frame_set(regions: list[TimeRegion], frame_period: float, duration: float) -> set[int]:
    n_frames = max(1, math.ceil(duration / frame_period))
    covered = set()
    for f in range(n_frames):
        center = f * frame_period + frame_period / 2
        if any(r.start <= center <= r.end for r in regions):
            covered.add(f)
    return covered


def iou2(predicted: list[TimeRegion], ground_truth: list[TimeRegion],
         frame_period: float, duration: float) -> float:
    """Frame-level set IoU: a frame counts as covered when its center lies
    inside some region."""
    if frame_period <= 0:
        raise ValueError("frame_period must be positive")
    p = _frame_set(predicted, frame_period, duration)
    g = _frame_set(ground_truth, frame_period, duration)
    union = p | g
    if not union:
        return 1.0
    return len(p & g) / len(union)


def corpus_iou(predictions: dict[str, list[TimeRegion]],
               ground_truths: dict[str, list[TimeRegion]],
               frame_periods: dict[str, float],
               durations: dict[str, float]) -> tuple[float, float]:
    """Corpus-mean IoU-1 and IoU-2 over per-answer region sets."""
    if not ground_truths:
        raise ValueError("no ground-truth regions")
    s1, s2 = 0.0, 0.0
    for key, gt in ground_truths.items():
        pred = predictions.get(key, [])
        s1 += iou1(pred, gt)
        s2 += iou2(pred, gt, frame_periods[key], durations[key])
    n = len(ground_truths)
    return s1 / n, s2 / n
