"""Attention and transformer-layer behavior."""

import math

import numpy as np
import pytest

from narasr import blocks, tensor as T
from narasr.errors import ContractError, DimensionError
from narasr.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_attn(d, heads, rng):
    return blocks.init_attention(d, heads, rng)


def zero_layer(d, heads, d_ff, activation, norm_mode):
    """Layer whose sublayer output projections are zero."""
    rng = np.random.default_rng(0)
    layer = blocks.init_transformer_layer(d, heads, d_ff, activation, norm_mode, 0.0, rng)
    layer.attn.W_o = T.zeros((d, d), requires_grad=True)
    layer.ffn.W_2 = T.zeros((d_ff, d), requires_grad=True)
    return layer


class TestSinusoidalPositions:
    def test_position_zero(self):
        pe = blocks.sinusoidal_positions(4, 8).data
        np.testing.assert_array_equal(pe[0, 0::2], np.zeros(4))
        np.testing.assert_array_equal(pe[0, 1::2], np.ones(4))

    def test_position_one_dim_zero(self):
        pe = blocks.sinusoidal_positions(4, 8).data
        np.testing.assert_allclose(pe[1, 0], math.sin(1.0), rtol=1e-12)

    def test_range(self):
        pe = blocks.sinusoidal_positions(50, 16).data
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_odd_width_rejected(self):
        with pytest.raises(DimensionError):
            blocks.sinusoidal_positions(4, 7)


class TestMultiHeadAttention:
    def test_single_key_weight_is_one(self, rng):
        d = 8
        params = make_attn(d, 2, rng)
        kv = Tensor(rng.standard_normal((1, d)))
        q = Tensor(rng.standard_normal((3, d)))
        out, w = blocks.multi_head_attention(q, kv, params, return_weights=True)
        np.testing.assert_allclose(w, np.ones_like(w))
        expected = (kv.data @ params.W_v.data) @ params.W_o.data
        np.testing.assert_allclose(out.data, np.broadcast_to(expected, (3, d)), rtol=1e-10)

    def test_mask_collapse_to_single_key(self, rng):
        d = 8
        params = make_attn(d, 2, rng)
        kv = Tensor(rng.standard_normal((5, d)))
        q = Tensor(rng.standard_normal((2, d)))
        j = 3
        mask = np.zeros((2, 5), dtype=bool)
        mask[:, j] = True
        masked = blocks.multi_head_attention(q, kv, params, mask=mask)
        single = blocks.multi_head_attention(q, Tensor(kv.data[j : j + 1]), params)
        np.testing.assert_allclose(masked.data, single.data, rtol=1e-10)

    def test_identical_keys_give_mean_value(self, rng):
        d = 8
        params = make_attn(d, 2, rng)
        row = rng.standard_normal((1, d))
        kv = Tensor(np.repeat(row, 6, axis=0))
        q = Tensor(rng.standard_normal((2, d)))
        out = blocks.multi_head_attention(q, kv, params)
        expected = (row @ params.W_v.data) @ params.W_o.data
        np.testing.assert_allclose(out.data, np.broadcast_to(expected, (2, d)), rtol=1e-9)

    def test_weight_rows_sum_to_one(self, rng):
        d = 16
        params = make_attn(d, 4, rng)
        q = Tensor(rng.standard_normal((3, 7, d)))
        kv = Tensor(rng.standard_normal((3, 5, d)))
        _, w = blocks.multi_head_attention(q, kv, params, return_weights=True)
        np.testing.assert_allclose(w.sum(axis=-1), np.ones((3, 4, 7)), atol=1e-6)

    def test_masked_positions_have_zero_influence(self, rng):
        d = 8
        params = make_attn(d, 2, rng)
        q = Tensor(rng.standard_normal((3, d)))
        kv_data = rng.standard_normal((4, d))
        mask = np.ones((3, 4), dtype=bool)
        mask[:, 2] = False
        base = blocks.multi_head_attention(Tensor(q.data), Tensor(kv_data), params, mask=mask)
        poked = kv_data.copy()
        poked[2] += 37.0
        after = blocks.multi_head_attention(Tensor(q.data), Tensor(poked), params, mask=mask)
        np.testing.assert_array_equal(base.data, after.data)

    def test_fully_masked_row_rejected(self, rng):
        params = make_attn(8, 2, rng)
        q = Tensor(rng.standard_normal((2, 8)))
        kv = Tensor(rng.standard_normal((3, 8)))
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        with pytest.raises(ContractError):
            blocks.multi_head_attention(q, kv, params, mask=mask)

    def test_key_permutation_equivariance(self, rng):
        d = 8
        params = make_attn(d, 2, rng)
        q = Tensor(rng.standard_normal((3, d)))
        kv = rng.standard_normal((5, d))
        perm = rng.permutation(5)
        out1 = blocks.multi_head_attention(q, Tensor(kv), params)
        out2 = blocks.multi_head_attention(q, Tensor(kv[perm]), params)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-10)


class TestTransformerLayer:
    def test_pre_norm_zero_sublayers_is_identity(self, rng):
        d = 8
        layer = zero_layer(d, 2, 16, "glu", "pre")
        x = Tensor(rng.standard_normal((5, d)))
        out = blocks.transformer_layer(x, x, layer)
        np.testing.assert_array_equal(out.data, x.data)

    def test_post_norm_zero_sublayers_normalizes(self, rng):
        d = 8
        layer = zero_layer(d, 2, 16, "relu", "post")
        x = Tensor(rng.standard_normal((5, d)))
        out = blocks.transformer_layer(x, x, layer)
        mu = x.data.mean(axis=-1, keepdims=True)
        sd = np.sqrt(x.data.var(axis=-1, keepdims=True) + blocks.LN_EPS)
        np.testing.assert_allclose(out.data, (x.data - mu) / sd, atol=1e-4)
        assert not np.allclose(out.data, x.data)

    def test_output_shape(self, rng):
        d = 8
        layer = blocks.init_transformer_layer(d, 2, 16, "glu", "pre", 0.0, rng)
        q = Tensor(rng.standard_normal((4, d)))
        kv = Tensor(rng.standard_normal((9, d)))
        assert blocks.transformer_layer(q, kv, layer).shape == (4, d)

    def test_dropout_training_reproducible(self, rng):
        d = 8
        layer = blocks.init_transformer_layer(d, 2, 16, "glu", "pre", 0.3, rng)
        x = Tensor(rng.standard_normal((5, d)))
        a = blocks.transformer_layer(x, x, layer, training=True, rng=np.random.default_rng(5))
        b = blocks.transformer_layer(x, x, layer, training=True, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("norm_mode,activation", [("pre", "glu"), ("post", "relu")])
    def test_gradient_check(self, norm_mode, activation):
        rng = np.random.default_rng(11)
        d, d_ff = 8, 6
        layer = blocks.init_transformer_layer(d, 2, d_ff, activation, norm_mode, 0.0, rng)
        x = Tensor(rng.standard_normal((5, d)))
        coeffs = rng.standard_normal((5, d))
        report = T.finite_difference_check(
            lambda t: T.tensor_sum(blocks.transformer_layer(t, t, layer) * coeffs),
            x,
            h=1e-5,
            op_name=f"transformer_{norm_mode}",
        )
        assert report.max_rel_error < 1e-4, report

    def test_batched_matches_unbatched(self, rng):
        d = 8
        layer = blocks.init_transformer_layer(d, 2, 16, "glu", "pre", 0.0, rng)
        x = rng.standard_normal((4, d))
        single = blocks.transformer_layer(Tensor(x), Tensor(x), layer)
        batched = blocks.transformer_layer(Tensor(x[None]), Tensor(x[None]), layer)
        np.testing.assert_allclose(batched.data[0], single.data, atol=1e-12)
