"""Verification harness: naive loop-based reimplementations of the encoder
and decoder blocks, exhaustive search oracles, and the check suite behind
``avdialog verify``.

The naive functions deliberately avoid the tensorized forward path: they use
plain Python loops over numpy scalars so that agreement with the torch
modules is evidence, not tautology.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from .data import SynthSpec, TimeRegion, generate_synthetic_corpus, save_corpus
from .decoder import DecoderBlock, DecoderConfig
from .encoder import BimodalEncoderBlock, EncoderConfig, EncodedStreams
from .generation import StepFn
from .metrics import iou_interval

_EPS = 1e-5  # torch LayerNorm default


def _w(param) -> np.ndarray:
    return param.detach().numpy().astype(np.float64)


def naive_layernorm(x: np.ndarray, ln) -> np.ndarray:
    weight, bias = _w(ln.weight), _w(ln.bias)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mean = sum(row) / len(row)
        var = sum((r - mean) ** 2 for r in row) / len(row)
        for j in range(len(row)):
            out[i, j] = (row[j] - mean) / math.sqrt(var + _EPS) * weight[j] + bias[j]
    return out


def naive_mha(q: np.ndarray, k: np.ndarray, v: np.ndarray, mha,
              causal: bool = False) -> np.ndarray:
    wq, bq = _w(mha.w_q.weight), _w(mha.w_q.bias)
    wk = _w(mha.w_k.weight)
    wv, bv = _w(mha.w_v.weight), _w(mha.w_v.bias)
    wo, bo = _w(mha.w_o.weight), _w(mha.w_o.bias)
    qp, kp, vp = q @ wq.T + bq, k @ wk.T, v @ wv.T + bv
    t_q, t_k, d_h = q.shape[0], k.shape[0], mha.d_head
    ctx = np.zeros((t_q, mha.heads * d_h))
    for h in range(mha.heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        for i in range(t_q):
            logits = []
            for j in range(t_k):
                if causal and j > i:
                    logits.append(-math.inf)
                else:
                    logits.append(sum(qp[i, sl][x] * kp[j, sl][x] for x in range(d_h))
                                  / math.sqrt(d_h))
            peak = max(logits)
            exps = [math.exp(l - peak) for l in logits]
            z = sum(exps)
            for j in range(t_k):
                weight = exps[j] / z
                for x in range(d_h):
                    ctx[i, h * d_h + x] += weight * vp[j, sl][x]
    return ctx @ wo.T + bo


def naive_ffn(x: np.ndarray, ff) -> np.ndarray:
    w1, b1 = _w(ff.fc1.weight), _w(ff.fc1.bias)
    w2, b2 = _w(ff.fc2.weight), _w(ff.fc2.bias)
    hidden = np.maximum(x @ w1.T + b1, 0.0)
    return hidden @ w2.T + b2


def naive_encoder_block(block: BimodalEncoderBlock, a: np.ndarray, v: np.ndarray):
    """Loop-based mirror of the bimodal block: self-attention residual,
    cross-modal attention residual, feed-forward residual (pre-norm)."""
    a_bar = a + naive_mha(naive_layernorm(a, block.ln_sa_a),
                          naive_layernorm(a, block.ln_sa_a),
                          naive_layernorm(a, block.ln_sa_a), block.sa_a)
    v_bar = v + naive_mha(naive_layernorm(v, block.ln_sa_v),
                          naive_layernorm(v, block.ln_sa_v),
                          naive_layernorm(v, block.ln_sa_v), block.sa_v)
    a_tld = a_bar + naive_mha(naive_layernorm(a_bar, block.ln_ca_qa),
                              naive_layernorm(v_bar, block.ln_ca_kva),
                              naive_layernorm(v_bar, block.ln_ca_kva), block.ca_a)
    v_tld = v_bar + naive_mha(naive_layernorm(v_bar, block.ln_ca_qv),
                              naive_layernorm(a_bar, block.ln_ca_kvv),
                              naive_layernorm(a_bar, block.ln_ca_kvv), block.ca_v)
    a_out = a_tld + naive_ffn(naive_layernorm(a_tld, block.ln_ff_a), block.ff_a)
    v_out = v_tld + naive_ffn(naive_layernorm(v_tld, block.ln_ff_v), block.ff_v)
    return a_out, v_out


def naive_decoder_block(block: DecoderBlock, y: np.ndarray, a: np.ndarray,
                        v: np.ndarray) -> np.ndarray:
    if block.cfg.fusion_mode != "concat" or block.cfg.use_caption:
        raise NotImplementedError("naive path covers the 2-modality concat block")
    h = naive_layernorm(y, block.ln_sa)
    y_bar = y + naive_mha(h, h, h, block.self_attn, causal=True)
    q = naive_layernorm(y_bar, block.ln_src)
    mem_a = naive_layernorm(a, block.ln_mem_a)
    mem_v = naive_layernorm(v, block.ln_mem_v)
    br_a = y_bar + naive_mha(q, mem_a, mem_a, block.src_a)
    br_v = y_bar + naive_mha(q, mem_v, mem_v, block.src_v)
    cat = np.concatenate([br_a, br_v], axis=1)
    return (br_a + br_v) / 2 + naive_ffn(naive_layernorm(cat, block.ln_ff), block.ff)


# ---------------------------------------------------------------------------
# search oracle
# ---------------------------------------------------------------------------

def exhaustive_best_sequence(step: StepFn, eos_id: int, vocab_size: int,
                             max_len: int) -> tuple[tuple[int, ...], float]:
    """Argmax over every sequence that either ends in <eos> or reaches
    max_len, scored by summed log probability."""
    best: tuple[float, tuple[int, ...]] = (-math.inf, ())

    def extend(prefix: tuple[int, ...], log_prob: float):
        nonlocal best
        if prefix and prefix[-1] == eos_id or len(prefix) == max_len:
            if log_prob > best[0]:
                best = (log_prob, prefix)
            return
        log_p = torch.log(step(list(prefix)).clamp_min(1e-12))
        for tok in range(vocab_size):
            extend(prefix + (tok,), log_prob + float(log_p[tok]))

    extend((), 0.0)
    return best[1], best[0]


# ---------------------------------------------------------------------------
# check suite
# ---------------------------------------------------------------------------

def _tiny_setup(seed: int = 0, fusion: str = "concat", use_caption: bool = False):
    from .data import build_vocabulary
    from .model import AVSDModel

    spec = SynthSpec(num_videos=2, turns_per_dialog=2, T_a=6, T_v=4,
                     D_a=4, D_v=4, vocab_size=2)
    corpus = generate_synthetic_corpus(spec, seed)
    vocab = build_vocabulary(corpus)
    enc = EncoderConfig(N=2, D_a=4, D_v=4, d_a=8, d_v=8, ff_a=12, ff_v=12,
                        heads=2, d_c=8, ff_c=12)
    dec = DecoderConfig(M=2, d=8, ff=12, heads=2, embed_dim=8,
                        fusion_mode=fusion, use_caption=use_caption)
    model = AVSDModel(vocab, enc, dec, seed=seed + 1)
    return corpus, vocab, model


def check_gradients() -> tuple[bool, str]:
    from .training import (forward_item, gradient_check, item_jstl_loss, item_loss,
                           make_items)

    corpus, vocab, student = _tiny_setup(seed=3)
    _, _, teacher = _tiny_setup(seed=4, fusion="attentional", use_caption=True)
    items = make_items(corpus, vocab, "previous_question_only")
    item = items[0]
    rep_s = gradient_check(student, lambda: item_loss(student, corpus, item),
                           coords_per_param=4)
    joint = torch.nn.ModuleDict({"t": teacher, "s": student})
    # freeze the stop-gradient side of the soft-target term so the numeric
    # difference measures the same gradient the optimizer applies
    with torch.no_grad():
        soft, _, _ = forward_item(teacher, corpus, item)
    rep_j = gradient_check(joint, lambda: item_jstl_loss(teacher, student, corpus,
                                                         item, 1.0, soft).total,
                           coords_per_param=3)
    worst = max(rep_s.max_error, rep_j.max_error)
    return worst < 1e-3, f"max relative error {worst:.2e}"


def check_encoder_equivalence(n_seeds: int = 10, tol: float = 1e-10) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(n_seeds):
        torch.manual_seed(seed)
        cfg = EncoderConfig(N=1, D_a=4, D_v=4, d_a=8, d_v=8, ff_a=12, ff_v=12,
                            heads=2, d_c=8, ff_c=12)
        block = BimodalEncoderBlock(cfg)
        a = torch.randn(3, 8, dtype=torch.float64)
        v = torch.randn(4, 8, dtype=torch.float64)
        with torch.no_grad():
            a_t, v_t = block(a, v)
        a_n, v_n = naive_encoder_block(block, a.numpy(), v.numpy())
        worst = max(worst, float(np.abs(a_t.numpy() - a_n).max()),
                    float(np.abs(v_t.numpy() - v_n).max()))
    return worst < tol, f"max abs deviation {worst:.2e}"


def check_decoder_equivalence(n_seeds: int = 10, tol: float = 1e-10) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(n_seeds):
        torch.manual_seed(100 + seed)
        cfg = DecoderConfig(M=1, d=8, ff=12, heads=2, embed_dim=8)
        block = DecoderBlock(cfg, d_a=8, d_v=8, d_c=0)
        y = torch.randn(3, 8, dtype=torch.float64)
        a = torch.randn(5, 8, dtype=torch.float64)
        v = torch.randn(4, 8, dtype=torch.float64)
        streams = EncodedStreams(A=a, V=v)
        with torch.no_grad():
            y_t, _, _ = block(y, streams)
        y_n = naive_decoder_block(block, y.numpy(), a.numpy(), v.numpy())
        worst = max(worst, float(np.abs(y_t.numpy() - y_n).max()))
    return worst < tol, f"max abs deviation {worst:.2e}"


def check_beam_enumeration(n_models: int = 5) -> tuple[bool, str]:
    from .generation import beam_search

    torch.manual_seed(7)
    vocab_size, max_len, eos = 4, 3, 2
    for trial in range(n_models):
        table = torch.softmax(torch.randn(40, vocab_size, dtype=torch.float64), dim=1)

        def step(prefix: list[int]) -> torch.Tensor:
            idx = 0
            for tok in prefix:
                idx = (idx * vocab_size + tok + 1) % table.shape[0]
            return table[idx]

        hyps = beam_search(step, eos, beam=vocab_size ** max_len, max_len=max_len,
                           length_normalize=False)
        best, best_lp = exhaustive_best_sequence(step, eos, vocab_size, max_len)
        if hyps[0].tokens != best or abs(hyps[0].log_prob - best_lp) > 1e-9:
            return False, f"trial {trial}: beam {hyps[0].tokens} != oracle {best}"
    return True, f"{n_models} random models agree with enumeration"


def check_ensemble_identities() -> tuple[bool, str]:
    from .generation import ensemble_next_distribution, generate_answer, make_ensemble_step, beam_search

    corpus, vocab, model = _tiny_setup(seed=9)
    item_sample = corpus.samples[0]
    from .data import build_decoder_context
    ctx = vocab.encode(build_decoder_context(item_sample, 0))
    streams = model.encode(corpus.features[item_sample.video_id])
    single = generate_answer(model, ctx, streams, beam=3, max_len=6)
    step = make_ensemble_step([model, model], ctx, [streams, streams])
    hyps = beam_search(step, vocab.eos_id, beam=3, max_len=6)
    double = hyps[0].answer(vocab.eos_id)
    if single != double:
        return False, f"self-ensemble {double} != single {single}"
    p1 = torch.tensor([0.9, 0.1], dtype=torch.float64)
    p2 = torch.tensor([0.1, 0.9], dtype=torch.float64)
    mix = ensemble_next_distribution([p1, p2])
    if not torch.allclose(mix, torch.tensor([0.5, 0.5], dtype=torch.float64), atol=1e-12):
        return False, f"symmetric ensemble {mix.tolist()} != uniform"
    return True, "self-ensemble and symmetric-mixture identities hold"


def check_iou_oracle(n_cases: int = 100) -> tuple[bool, str]:
    from .metrics import iou2

    rng = np.random.default_rng(11)
    for case in range(n_cases):
        duration = float(rng.uniform(5, 20))
        fp = float(rng.uniform(0.2, 1.5))
        def rand_regions():
            out = []
            for _ in range(int(rng.integers(0, 4))):
                s = float(rng.uniform(0, duration))
                e = float(min(duration, s + rng.uniform(0, duration / 2)))
                out.append(TimeRegion(s, e))
            return out
        pred, gt = rand_regions(), rand_regions()
        # brute-force frame enumeration
        frames = int(math.ceil(duration / fp))
        p_set = {f for f in range(max(1, frames))
                 if any(r.start <= f * fp + fp / 2 <= r.end for r in pred)}
        g_set = {f for f in range(max(1, frames))
                 if any(r.start <= f * fp + fp / 2 <= r.end for r in gt)}
        expect = 1.0 if not (p_set | g_set) else len(p_set & g_set) / len(p_set | g_set)
        got = iou2(pred, gt, fp, duration)
        if got != expect:
            return False, f"case {case}: iou2 {got} != oracle {expect}"
    return True, f"{n_cases} random region sets match the frame-set oracle"


def check_attention_region_moments() -> tuple[bool, str]:
    from .reasoning import AttentionTrace, attention_region

    rows = np.full((1, 10), 0.1)
    trace = AttentionTrace(rows={"visual": rows}, frame_rates={"visual": 1.0, "audio": 1.0})
    region = attention_region(trace, 1.0, duration=20.0)
    mu, sigma = 4.5, math.sqrt(8.25)
    ok = (abs(region.start - (mu - sigma)) < 1e-9 and abs(region.end - (mu + sigma)) < 1e-9)
    return ok, f"uniform-attention region [{region.start:.4f}, {region.end:.4f}]"


def check_synth_determinism(tmp_dir) -> tuple[bool, str]:
    from pathlib import Path

    spec = SynthSpec(num_videos=3, turns_per_dialog=2, T_a=6, T_v=4, D_a=4, D_v=4,
                     vocab_size=2)
    base = Path(tmp_dir)
    blobs = []
    for run in range(2):
        d = base / f"run{run}"
        save_corpus(generate_synthetic_corpus(spec, 42), d / "train.json", d / "features")
        blobs.append({p.name: p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    return blobs[0] == blobs[1], "two generations are byte-identical"


def run_all(tmp_dir: str = "/tmp") -> list[tuple[str, bool, str]]:
    checks = [
        ("gradient_check", check_gradients),
        ("encoder_block_vs_naive", check_encoder_equivalence),
        ("decoder_block_vs_naive", check_decoder_equivalence),
        ("beam_vs_enumeration", check_beam_enumeration),
        ("ensemble_identities", check_ensemble_identities),
        ("iou2_vs_frame_oracle", check_iou_oracle),
        ("attention_region_moments", check_attention_region_moments),
        ("synthetic_determinism", lambda: check_synth_determinism(tmp_dir)),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
