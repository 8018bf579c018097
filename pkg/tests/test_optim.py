"""Learning-rate schedule and Adam update rules."""

import numpy as np
import pytest

from narasr import optim
from narasr.errors import ContractError, DimensionError
from narasr.tensor import Tensor


class TestNoam:
    def test_peak_at_warmup(self):
        s = optim.Schedule(d_model=256, warmup_steps=400)
        peak = optim.noam_lr(400, s)
        assert peak == pytest.approx(256 ** -0.5 * 400 ** -0.5, rel=1e-15)

    def test_half_peak_at_four_warmup(self):
        s = optim.Schedule(d_model=256, warmup_steps=400)
        assert optim.noam_lr(1600, s) == pytest.approx(optim.noam_lr(400, s) / 2, abs=1e-12)

    def test_first_step_value(self):
        s = optim.Schedule(d_model=256, warmup_steps=400)
        assert optim.noam_lr(1, s) == pytest.approx(7.8125e-6, rel=1e-9)

    def test_monotone_up_then_down(self):
        s = optim.Schedule(d_model=64, warmup_steps=50)
        values = [optim.noam_lr(t, s) for t in range(1, 501)]
        for i in range(49):
            assert values[i] < values[i + 1]
        for i in range(50, 499):
            assert values[i] > values[i + 1]

    def test_step_zero_rejected(self):
        with pytest.raises(ContractError):
            optim.noam_lr(0, optim.Schedule(d_model=8, warmup_steps=4))


class TestAdam:
    def make_params(self, rng):
        return {
            "w": Tensor(rng.standard_normal((3, 2)), requires_grad=True),
            "b": Tensor(rng.standard_normal(2), requires_grad=True),
        }

    def test_zero_grad_is_noop(self):
        rng = np.random.default_rng(0)
        params = self.make_params(rng)
        before = {k: p.data.copy() for k, p in params.items()}
        state = optim.AdamState(params)
        optim.adam_step(params, {k: np.zeros_like(p.data) for k, p in params.items()}, state, 0.1)
        for k, p in params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_first_step_magnitude_is_lr(self):
        params = {"w": Tensor(np.zeros(4), requires_grad=True)}
        state = optim.AdamState(params)
        g = np.full(4, 0.37)
        optim.adam_step(params, {"w": g}, state, lr=0.01)
        np.testing.assert_allclose(np.abs(params["w"].data), 0.01, rtol=1e-6)
        assert (np.sign(params["w"].data) == -1).all()

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(1)
            params = self.make_params(rng)
            state = optim.AdamState(params)
            for i in range(5):
                grads = {k: rng.standard_normal(p.data.shape) for k, p in params.items()}
                optim.adam_step(params, grads, state, 0.05)
            return {k: p.data.copy() for k, p in params.items()}

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_shape_mismatch(self):
        params = {"w": Tensor(np.zeros(4), requires_grad=True)}
        state = optim.AdamState(params)
        with pytest.raises(DimensionError):
            optim.adam_step(params, {"w": np.zeros(5)}, state, 0.1)
