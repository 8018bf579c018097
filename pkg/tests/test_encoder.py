"""Acoustic encoder: length contracts, masking, end-to-end gradients."""

import numpy as np
import pytest

from narasr import encoder as enc
from narasr import tensor as T
from narasr.tensor import Tensor


def micro_config(**overrides):
    base = dict(
        d_m=8, d_n=12, feat_dim=6, cnn_filters=2, kernel=3,
        self_attn_layers_pre=1, refine_layers=0, self_attn_layers_post=1,
        heads=2, d_ff=8, query_count=4, dropout=0.0,
    )
    base.update(overrides)
    return enc.EncoderConfig(**base)


@pytest.fixture
def params():
    return enc.init_encoder(micro_config(), np.random.default_rng(0))


class TestSubsampleLengths:
    def test_quarter_of_100(self, params):
        rng = np.random.default_rng(1)
        out = enc.subsample_cnn(Tensor(rng.standard_normal((100, 6))), params)
        assert out.shape == (25, 8)

    def test_single_frame(self, params):
        out = enc.subsample_cnn(Tensor(np.zeros((1, 6))), params)
        assert out.shape[0] == 1

    def test_seven_frames(self, params):
        out = enc.subsample_cnn(Tensor(np.zeros((7, 6))), params)
        assert out.shape[0] == 2

    def test_formula_exhaustive_to_200(self):
        for t in range(1, 201):
            assert enc.output_frame_count(t) == -(-(-(-t // 2)) // 2)


class TestEncodeAcoustic:
    def test_output_shape(self, params):
        rng = np.random.default_rng(2)
        for t in (4, 9, 33):
            out = enc.encode_acoustic(Tensor(rng.standard_normal((t, 6))), params)
            assert out.shape == (enc.output_frame_count(t), 8)

    def test_zero_sublayers_pass_through(self):
        params = enc.init_encoder(micro_config(), np.random.default_rng(0))
        for layer in params.pre_layers:
            layer.attn.W_o = T.zeros((8, 8), requires_grad=True)
            layer.ffn.W_2 = T.zeros((8, 8), requires_grad=True)
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((10, 6)))
        cnn = enc.subsample_cnn(x, params)
        positions = __import__("narasr.blocks", fromlist=["blocks"]).sinusoidal_positions(cnn.shape[0], 8).data
        out = enc.encode_acoustic(x, params)
        np.testing.assert_allclose(out.data, cnn.data + positions, atol=1e-12)

    def test_gradient_reaches_cnn_filters(self, params):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 6)))
        coeffs = rng.standard_normal((1, 8))
        report = T.finite_difference_check(
            lambda t: T.tensor_sum(enc.encode_acoustic(Tensor(x.data), _with_conv1(params, t)) * coeffs),
            params.conv1_w,
            h=1e-5,
        )
        assert report.max_rel_error < 1e-3, report


def _with_conv1(params, w):
    import copy

    clone = copy.copy(params)
    clone.conv1_w = w
    return clone


class TestAlignQueries:
    def test_output_length_fixed(self, params):
        rng = np.random.default_rng(5)
        for t4 in (1, 3, 11):
            h_a = Tensor(rng.standard_normal((t4, 8)))
            out = enc.align_queries(h_a, params)
            assert out.shape == (4, 8)

    def test_single_frame_uniform_attention(self, params):
        rng = np.random.default_rng(6)
        h_a = Tensor(rng.standard_normal((1, 8)))
        out = enc.align_queries(h_a, params)
        assert out.shape == (4, 8)

    def test_every_frame_influences_output(self, params):
        # perturb one element, not a whole row: pre-norm keys are invariant
        # to adding a constant across a frame's feature vector
        rng = np.random.default_rng(7)
        base_data = rng.standard_normal((5, 8))
        base = enc.align_queries(Tensor(base_data), params)
        for t in range(5):
            poked = base_data.copy()
            poked[t, 2] += 1.0
            after = enc.align_queries(Tensor(poked), params)
            assert not np.allclose(after.data, base.data), f"frame {t} had no influence"

    def test_attention_rows_sum_to_one(self, params):
        from narasr import blocks

        rng = np.random.default_rng(8)
        h_a = Tensor(rng.standard_normal((6, 8)))
        queries = Tensor(params.query_table.data)
        _, w = blocks.multi_head_attention(queries, h_a, params.align_layers[0].attn, return_weights=True)
        np.testing.assert_allclose(w.sum(axis=-1), np.ones_like(w.sum(axis=-1)), atol=1e-6)


class TestFinalEmbeddings:
    def test_projection_shape(self, params):
        rng = np.random.default_rng(9)
        out = enc.final_embeddings(Tensor(rng.standard_normal((4, 8))), params)
        assert out.shape == (4, 12)

    def test_zero_projection_gives_bias(self, params):
        import copy

        rng = np.random.default_rng(10)
        clone = copy.copy(params)
        clone.out_proj_W = T.zeros((8, 12), requires_grad=True)
        clone.out_proj_b = Tensor(np.full(12, 0.75), requires_grad=True)
        out = enc.final_embeddings(Tensor(rng.standard_normal((4, 8))), clone)
        np.testing.assert_array_equal(out.data, np.full((4, 12), 0.75))


class TestEncoderForward:
    def test_eval_deterministic(self, params):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((20, 6))
        a = enc.encoder_forward(Tensor(x), params)
        b = enc.encoder_forward(Tensor(x), params)
        np.testing.assert_array_equal(a.data, b.data)

    def test_length_contract_wide_range(self, params):
        rng = np.random.default_rng(12)
        for t in (4, 7, 64, 200):
            out = enc.encoder_forward(Tensor(rng.standard_normal((t, 6))), params)
            assert out.shape == (4, 12)

    def test_batch_of_one_equals_unbatched(self, params):
        rng = np.random.default_rng(13)
        t_a = 17
        x_a = rng.standard_normal((t_a, 6))
        x_b = rng.standard_normal((29, 6))
        padded = np.zeros((2, 29, 6))
        padded[0, :t_a] = x_a
        padded[1] = x_b
        batched = enc.encoder_forward(Tensor(padded), params, lengths=np.array([t_a, 29]))
        single = enc.encoder_forward(Tensor(x_a), params)
        np.testing.assert_allclose(batched.data[0], single.data, atol=1e-5)

    def test_padding_without_mask_changes_output(self, params):
        # trailing zero frames are only neutral when a frame mask is supplied
        rng = np.random.default_rng(14)
        x = rng.standard_normal((12, 6))
        plain = enc.encoder_forward(Tensor(x), params)
        padded = np.concatenate([x, np.zeros((8, 6))], axis=0)
        unmasked = enc.encoder_forward(Tensor(padded), params)
        masked = enc.encoder_forward(
            Tensor(padded[None]), params, lengths=np.array([12])
        )
        assert not np.allclose(unmasked.data, plain.data, atol=1e-5)
        np.testing.assert_allclose(masked.data[0], plain.data, atol=1e-5)

    def test_end_to_end_gradient_micro(self):
        config = micro_config(query_count=4)
        params = enc.init_encoder(config, np.random.default_rng(15))
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((6, 6)))
        coeffs = rng.standard_normal((4, 12))
        report = T.finite_difference_check(
            lambda t: T.tensor_sum(enc.encoder_forward(t, params) * coeffs), x, h=1e-5
        )
        assert report.max_rel_error < 1e-3, report
