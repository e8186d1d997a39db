import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from avdialog.generation import (Hypothesis, beam_search, ensemble_next_distribution,
                                 generate_answer, greedy_decode, make_ensemble_step,
                                 make_step)
from avdialog.verify import exhaustive_best_sequence

EOS = 2


def table_step(table: torch.Tensor, vocab_size: int):
    """Deterministic step function indexed by a rolling hash of the prefix."""
    def step(prefix):
        idx = 0
        for tok in prefix:
            idx = (idx * vocab_size + tok + 1) % table.shape[0]
        return table[idx]
    return step


def random_step(seed: int, vocab_size: int = 4, rows: int = 64):
    g = torch.Generator().manual_seed(seed)
    table = torch.softmax(torch.randn(rows, vocab_size, dtype=torch.float64,
                                      generator=g), dim=1)
    return table_step(table, vocab_size)


class TestHypothesis:
    def test_score_normalization(self):
        h = Hypothesis((3, 4, EOS), -6.0, True)
        assert h.score(False) == -6.0
        assert h.score(True) == -2.0

    def test_empty_hypothesis_score(self):
        assert Hypothesis((), 0.0, False).score(True) == 0.0

    def test_answer_strips_eos(self):
        assert Hypothesis((3, 4, EOS), -1.0, True).answer(EOS) == [3, 4]


class TestBeamSearch:
    def test_exhaustive_beam_matches_enumeration(self):
        # with beam >= |V|^max_len every sequence survives, so the top
        # hypothesis must equal the brute-force argmax
        for seed in range(20):
            step = random_step(seed)
            hyps = beam_search(step, EOS, beam=4 ** 3, max_len=3,
                               length_normalize=False)
            best, best_lp = exhaustive_best_sequence(step, EOS, 4, 3)
            assert hyps[0].tokens == best
            assert hyps[0].log_prob == pytest.approx(best_lp, abs=1e-9)

    def test_beam_one_equals_greedy(self):
        for seed in range(5):
            step = random_step(seed + 100)
            hyps = beam_search(step, EOS, beam=1, max_len=6, length_normalize=False)
            greedy = greedy_decode(step, EOS, max_len=6)
            assert hyps[0].answer(EOS) == greedy

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_wider_beam_never_worse(self, seed):
        step = random_step(seed, vocab_size=3)
        narrow = beam_search(step, EOS, beam=2, max_len=4, length_normalize=False)
        wide = beam_search(step, EOS, beam=8, max_len=4, length_normalize=False)
        assert wide[0].log_prob >= narrow[0].log_prob - 1e-12

    def test_scores_are_sums_of_step_logs(self):
        step = random_step(7)
        for hyp in beam_search(step, EOS, beam=3, max_len=4, length_normalize=False):
            total = 0.0
            for i, tok in enumerate(hyp.tokens):
                total += math.log(float(step(list(hyp.tokens[:i]))[tok]))
            assert hyp.log_prob == pytest.approx(total, abs=1e-9)

    def test_unfinished_at_max_len_returned(self):
        # eos never probable -> all hypotheses run to max_len unfinished
        table = torch.tensor([[0.5, 0.5 - 1e-12, 1e-12]], dtype=torch.float64)
        hyps = beam_search(table_step(table, 3), EOS, beam=2, max_len=3)
        assert all(len(h.tokens) == 3 and not h.finished for h in hyps)

    def test_length_normalization_prefers_longer(self):
        # short path p=0.5 beats long path p=0.45*0.9=0.405 on raw log prob,
        # but loses per-token: log 0.5 < (log 0.45 + log 0.9) / 2
        table = torch.zeros(5, 3, dtype=torch.float64)
        table[0] = torch.tensor([0.45, 0.05, 0.50])   # start: "0" vs eos
        table[1] = torch.tensor([0.05, 0.05, 0.90])   # after "0": eos
        step = table_step(table, 3)
        plain = beam_search(step, EOS, beam=3, max_len=2, length_normalize=False)
        normed = beam_search(step, EOS, beam=3, max_len=2, length_normalize=True)
        assert plain[0].tokens == (EOS,)
        assert normed[0].tokens == (0, EOS)

    def test_invalid_beam(self):
        with pytest.raises(ValueError):
            beam_search(random_step(0), EOS, beam=0)

    def test_deterministic(self):
        step = random_step(13)
        assert beam_search(step, EOS, beam=4, max_len=5) == \
            beam_search(step, EOS, beam=4, max_len=5)


class TestGreedy:
    def test_stops_at_eos(self):
        table = torch.tensor([[0.1, 0.2, 0.7]], dtype=torch.float64)
        assert greedy_decode(table_step(table, 3), EOS, max_len=10) == []

    def test_respects_max_len(self):
        table = torch.tensor([[0.9, 0.05, 0.05]], dtype=torch.float64)
        assert greedy_decode(table_step(table, 3), EOS, max_len=4) == [0, 0, 0, 0]


class TestEnsemble:
    def test_geometric_mean_identity(self):
        p = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
        assert torch.allclose(ensemble_next_distribution([p, p]), p, atol=1e-12)

    def test_symmetric_pair_is_uniform(self):
        p1 = torch.tensor([0.9, 0.1], dtype=torch.float64)
        p2 = torch.tensor([0.1, 0.9], dtype=torch.float64)
        mix = ensemble_next_distribution([p1, p2])
        assert torch.allclose(mix, torch.full((2,), 0.5, dtype=torch.float64), atol=1e-12)

    def test_oracle_geometric_mean(self):
        p1 = torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64)
        p2 = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
        geo = torch.sqrt(p1 * p2)
        assert torch.allclose(ensemble_next_distribution([p1, p2]), geo / geo.sum(),
                              atol=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            ensemble_next_distribution([torch.ones(2) / 2, torch.ones(3) / 3])


class TestModelGeneration:
    def test_self_ensemble_token_identical(self, tiny_model, tiny_corpus, tiny_vocab):
        from avdialog.data import build_decoder_context
        sample = tiny_corpus.samples[0]
        ctx = tiny_vocab.encode(build_decoder_context(sample, 0))
        streams = tiny_model.encode(tiny_corpus.features[sample.video_id])
        single = generate_answer(tiny_model, ctx, streams, beam=3, max_len=6)
        step = make_ensemble_step([tiny_model, tiny_model], ctx, [streams, streams])
        hyps = beam_search(step, tiny_vocab.eos_id, beam=3, max_len=6)
        assert hyps[0].answer(tiny_vocab.eos_id) == single

    def test_generation_deterministic(self, tiny_model, tiny_corpus, tiny_vocab):
        from avdialog.data import build_decoder_context
        sample = tiny_corpus.samples[1]
        ctx = tiny_vocab.encode(build_decoder_context(sample, 0))
        streams = tiny_model.encode(tiny_corpus.features[sample.video_id])
        a = generate_answer(tiny_model, ctx, streams, beam=2, max_len=5)
        b = generate_answer(tiny_model, ctx, streams, beam=2, max_len=5)
        assert a == b

    def test_make_step_distribution(self, tiny_model, tiny_corpus, tiny_vocab):
        streams = tiny_model.encode(next(iter(tiny_corpus.features.values())))
        step = make_step(tiny_model, [tiny_vocab.sos_id], streams)
        dist = step([4])
        assert dist.shape == (len(tiny_vocab),)
        assert float(dist.sum()) == pytest.approx(1.0, abs=1e-12)
