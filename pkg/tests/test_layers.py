import math

import numpy as np
import pytest
import torch

from avdialog.layers import (AttentionMaskError, FeedForward, MultiHeadAttention,
                             causal_mask, init_parameters, sinusoidal_encoding)
from avdialog.verify import naive_ffn, naive_layernorm, naive_mha


class TestSinusoidalEncoding:
    def test_shape_and_range(self):
        pe = sinusoidal_encoding(7, 10)
        assert pe.shape == (7, 10)
        assert pe.abs().max() <= 1.0

    def test_first_position_alternates_zero_one(self):
        pe = sinusoidal_encoding(4, 8)
        assert torch.equal(pe[0, 0::2], torch.zeros(4, dtype=torch.float64))
        assert torch.equal(pe[0, 1::2], torch.ones(4, dtype=torch.float64))

    def test_oracle_formula(self):
        pe = sinusoidal_encoding(5, 6)
        for pos in range(5):
            for i in range(3):
                angle = pos / 10000 ** (2 * i / 6)
                assert pe[pos, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
                assert pe[pos, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)

    def test_prefix_stability(self):
        # extending the sequence must not change earlier rows (incremental decode)
        assert torch.equal(sinusoidal_encoding(3, 8), sinusoidal_encoding(9, 8)[:3])


def test_causal_mask_is_lower_triangular():
    m = causal_mask(4)
    for i in range(4):
        for j in range(4):
            assert bool(m[i, j]) == (j <= i)


class TestMultiHeadAttention:
    def test_matches_naive_loops(self):
        torch.manual_seed(1)
        mha = MultiHeadAttention(8, 6, heads=2)
        q = torch.randn(3, 8, dtype=torch.float64)
        kv = torch.randn(5, 6, dtype=torch.float64)
        with torch.no_grad():
            out, _ = mha(q, kv, kv)
        expect = naive_mha(q.numpy(), kv.numpy(), kv.numpy(), mha)
        np.testing.assert_allclose(out.numpy(), expect, atol=1e-12)

    def test_causal_mask_matches_naive(self):
        torch.manual_seed(2)
        mha = MultiHeadAttention(8, 8, heads=4)
        x = torch.randn(5, 8, dtype=torch.float64)
        with torch.no_grad():
            out, _ = mha(x, x, x, mask=causal_mask(5))
        expect = naive_mha(x.numpy(), x.numpy(), x.numpy(), mha, causal=True)
        np.testing.assert_allclose(out.numpy(), expect, atol=1e-12)

    def test_weights_are_distributions(self):
        torch.manual_seed(3)
        mha = MultiHeadAttention(4, 4, heads=2)
        x = torch.randn(6, 4, dtype=torch.float64)
        _, w = mha(x, x, x, mask=causal_mask(6))
        assert w.shape == (2, 6, 6)
        assert torch.allclose(w.sum(dim=-1), torch.ones(2, 6, dtype=torch.float64))
        assert torch.all(w[:, 0, 1:] == 0)  # first row sees only itself

    def test_permutation_equivariance_without_positions(self):
        # self-attention commutes with permuting the query rows when keys stay put
        torch.manual_seed(4)
        mha = MultiHeadAttention(6, 6, heads=3)
        q = torch.randn(4, 6, dtype=torch.float64)
        kv = torch.randn(5, 6, dtype=torch.float64)
        perm = torch.tensor([2, 0, 3, 1])
        with torch.no_grad():
            out, _ = mha(q, kv, kv)
            out_p, _ = mha(q[perm], kv, kv)
        assert torch.allclose(out[perm], out_p)

    def test_fully_masked_row_raises(self):
        mha = MultiHeadAttention(4, 4, heads=2)
        x = torch.randn(2, 4, dtype=torch.float64)
        with pytest.raises(AttentionMaskError):
            mha(x, x, x, mask=torch.zeros(2, 2, dtype=torch.bool))

    def test_mask_shape_checked(self):
        mha = MultiHeadAttention(4, 4, heads=2)
        x = torch.randn(3, 4, dtype=torch.float64)
        with pytest.raises(ValueError):
            mha(x, x, x, mask=causal_mask(2))

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 6, heads=4)

    def test_key_has_no_bias(self):
        # a key bias shifts all logits of a row equally, so softmax ignores it;
        # keeping it would leave parameters with identically zero gradient
        assert MultiHeadAttention(4, 4, heads=2).w_k.bias is None


class TestFeedForward:
    def test_matches_naive(self):
        torch.manual_seed(5)
        ff = FeedForward(6, 10, 4)
        x = torch.randn(3, 6, dtype=torch.float64)
        with torch.no_grad():
            out = ff(x)
        np.testing.assert_allclose(out.numpy(), naive_ffn(x.numpy(), ff), atol=1e-12)

    def test_default_output_width(self):
        ff = FeedForward(6, 10)
        assert ff(torch.zeros(2, 6, dtype=torch.float64)).shape == (2, 6)

    def test_pointwise(self):
        torch.manual_seed(6)
        ff = FeedForward(5, 7)
        x = torch.randn(4, 5, dtype=torch.float64)
        with torch.no_grad():
            rows = torch.cat([ff(x[i : i + 1]) for i in range(4)])
            assert torch.allclose(ff(x), rows)


def test_naive_layernorm_matches_torch():
    torch.manual_seed(7)
    ln = torch.nn.LayerNorm(6, dtype=torch.float64)
    with torch.no_grad():
        ln.weight.uniform_(0.5, 1.5)
        ln.bias.uniform_(-0.5, 0.5)
    x = torch.randn(4, 6, dtype=torch.float64)
    with torch.no_grad():
        expect = ln(x)
    np.testing.assert_allclose(naive_layernorm(x.numpy(), ln), expect.numpy(), atol=1e-12)


class TestInit:
    def test_deterministic_per_seed(self):
        a = MultiHeadAttention(8, 8, heads=2)
        b = MultiHeadAttention(8, 8, heads=2)
        init_parameters(a, 3)
        init_parameters(b, 3)
        for pa, pb in zip(a.parameters(), b.parameters(), strict=True):
            assert torch.equal(pa, pb)

    def test_seed_changes_weights(self):
        a = MultiHeadAttention(8, 8, heads=2)
        ref = None
        for seed in (1, 2):
            init_parameters(a, seed)
            w = a.w_q.weight.detach().clone()
            if ref is not None:
                assert not torch.equal(ref, w)
            ref = w

    def test_biases_zero_and_bound_respected(self):
        ff = FeedForward(16, 8)
        init_parameters(ff, 0)
        assert torch.all(ff.fc1.bias == 0)
        assert ff.fc1.weight.abs().max() <= 1 / math.sqrt(16)
