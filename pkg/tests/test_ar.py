"""Autoregressive baseline: causality, decoding, gradients."""

import numpy as np
import pytest

from narasr import ar
from narasr import tensor as T
from narasr import tokenizer as tok
from narasr.tensor import Tensor


def micro_params(vocab=9, layers=2, d_m=8, seed=0):
    cfg = ar.ArConfig(vocab_size=vocab, d_m=d_m, layers=layers, heads=2, d_ff=8, max_len=10, dropout=0.0)
    return ar.init_ar_decoder(cfg, np.random.default_rng(seed))


@pytest.fixture
def h_a():
    return Tensor(np.random.default_rng(1).standard_normal((5, 8)))


class TestCausality:
    def test_future_tokens_invisible(self, h_a):
        params = micro_params()
        rng = np.random.default_rng(2)
        ids = rng.integers(0, 9, size=6)
        base = ar.ar_forward(ids, h_a, params)
        for j in range(1, 6):
            poked = ids.copy()
            poked[j] = (poked[j] + 3) % 9
            after = ar.ar_forward(poked, h_a, params)
            np.testing.assert_array_equal(
                after.data[:j], base.data[:j], err_msg=f"changing token {j} leaked backwards"
            )

    def test_causality_across_depths(self, h_a):
        for layers in (1, 3):
            params = micro_params(layers=layers, seed=layers)
            ids = np.array([tok.CLS_ID, 5, 6, 7])
            base = ar.ar_forward(ids, h_a, params)
            poked = ids.copy()
            poked[3] = 8
            after = ar.ar_forward(poked, h_a, params)
            np.testing.assert_array_equal(after.data[:3], base.data[:3])


class TestArForward:
    def test_seed_step_shape(self, h_a):
        params = micro_params()
        logits = ar.ar_forward(np.array([tok.CLS_ID]), h_a, params)
        assert logits.shape == (1, 9)

    def test_gradient_check_micro(self):
        params = micro_params(vocab=7)
        rng = np.random.default_rng(3)
        h_a = Tensor(rng.standard_normal((4, 8)))
        ids = np.array([tok.CLS_ID, 5, 6])
        report = T.finite_difference_check(
            lambda t: T.label_smoothed_nll(ar.ar_forward(ids, t, params), [5, 6, tok.SEP_ID], 0.1),
            h_a,
            h=1e-5,
        )
        assert report.max_rel_error < 1e-3, report


class TestGreedyDecode:
    def test_immediate_sep(self, h_a):
        params = micro_params()
        params.head_W = T.zeros((8, 9), requires_grad=True)
        bias = np.zeros(9)
        bias[tok.SEP_ID] = 10.0
        params.head_b = Tensor(bias, requires_grad=True)
        steps = []
        out = ar.ar_greedy_decode(h_a, params, max_len=10, step_counter=steps)
        np.testing.assert_array_equal(out, [tok.CLS_ID, tok.SEP_ID])
        assert len(steps) == 1

    def test_never_sep_hits_cap(self, h_a):
        params = micro_params()
        params.head_W = T.zeros((8, 9), requires_grad=True)
        bias = np.zeros(9)
        bias[7] = 10.0
        params.head_b = Tensor(bias, requires_grad=True)
        steps = []
        out = ar.ar_greedy_decode(h_a, params, max_len=10, step_counter=steps)
        assert len(out) == 10
        assert len(steps) == 9

    def test_deterministic(self, h_a):
        params = micro_params(seed=4)
        a = ar.ar_greedy_decode(h_a, params, max_len=10)
        b = ar.ar_greedy_decode(h_a, params, max_len=10)
        np.testing.assert_array_equal(a, b)

    def test_k_token_output_needs_k_forwards(self, h_a):
        params = micro_params(seed=5)
        steps = []
        out = ar.ar_greedy_decode(h_a, params, max_len=10, step_counter=steps)
        assert len(steps) == len(out) - 1
