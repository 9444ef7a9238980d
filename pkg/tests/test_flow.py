import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsdit import tensor as T
from dsdit.flow import (DEFAULT_OMEGA, DEFAULT_STEPS, FlowSample, SamplerConfig, autoguide,
                        euler_sample, guided_velocity, interpolate, rf_loss, sample_timestep)
from dsdit.tensor import DimensionError, NumericError, SeededRng, Tape, Tensor, backward


def constant_field(c):
    return lambda x, t, lr, ref, lam: np.broadcast_to(c, x.shape)


def linear_field(x, t, lr, ref, lam):
    return x


class TestInterpolate:
    def test_endpoints(self):
        rng = SeededRng(0)
        x0, x1 = rng.normal((2, 3)), rng.normal((2, 3))
        assert np.array_equal(interpolate(x0, x1, 0.0), x0)
        assert np.array_equal(interpolate(x0, x1, 1.0), x1)

    def test_half(self):
        assert np.array_equal(interpolate(np.zeros(3), np.full(3, 2.0), 0.5), np.ones(3))

    def test_per_sample_time(self):
        rng = SeededRng(1)
        x0, x1 = rng.normal((3, 4, 4)), rng.normal((3, 4, 4))
        t = np.array([0.1, 0.5, 0.9])
        out = interpolate(x0, x1, t)
        for i in range(3):
            assert np.max(np.abs(out[i] - ((1 - t[i]) * x0[i] + t[i] * x1[i]))) <= 1e-15

    @pytest.mark.parametrize("t", [-0.01, 1.01])
    def test_out_of_range(self, t):
        with pytest.raises(ValueError):
            interpolate(np.zeros(2), np.ones(2), t)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            interpolate(np.zeros(2), np.ones(3), 0.5)

    def test_flow_sample_target(self):
        s = FlowSample(np.zeros(3), np.array([1.0, 2.0, 3.0]), np.array(0.25))
        assert s.v_target.tolist() == [1.0, 2.0, 3.0]
        assert s.xt.tolist() == [0.25, 0.5, 0.75]


class TestLoss:
    def test_zero_for_exact_velocity(self):
        rng = SeededRng(2)
        x0, x1 = rng.normal((2, 3)), rng.normal((2, 3))
        assert rf_loss(Tensor(x1 - x0), x0, x1).item() == 0.0

    def test_value_and_gradient(self):
        rng = SeededRng(3)
        x0, x1, v = rng.normal((2, 3)), rng.normal((2, 3)), rng.normal((2, 3))
        p = Tensor(v, requires_grad=True)
        with Tape() as tape:
            loss = rf_loss(p, x0, x1)
        diff = v - (x1 - x0)
        assert abs(loss.item() - np.mean(diff**2)) <= 1e-15
        assert np.max(np.abs(backward(loss, tape, [p])[p] - 2 * diff / diff.size)) <= 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rf_loss(Tensor(np.zeros(3)), np.zeros(2), np.ones(2))


class TestTimestep:
    def test_uniform_mean(self):
        t = sample_timestep(SeededRng(4), 100000)
        assert t.min() >= 0.0 and t.max() < 1.0
        assert abs(t.mean() - 0.5) <= 0.005

    def test_logit_normal_is_symmetric(self):
        t = sample_timestep(SeededRng(5), 100000, "logit_normal")
        assert 0.0 < t.min() and t.max() < 1.0
        assert abs(t.mean() - 0.5) <= 0.005

    def test_unknown(self):
        with pytest.raises(ValueError):
            sample_timestep(SeededRng(6), 3, "cosine")


class TestEuler:
    def test_constant_velocity_is_exact(self):
        x1 = SeededRng(7).normal((2, 4))
        c = np.linspace(-1, 1, 4)
        out = euler_sample(constant_field(c), x1, None, None, SamplerConfig(steps=40, guidance=False))
        assert np.max(np.abs(out - (x1 - c))) <= 1e-12

    @pytest.mark.parametrize("steps", [1, 7, 40])
    def test_linear_field_matches_product(self, steps):
        x1 = SeededRng(8).normal((3,))
        out = euler_sample(linear_field, x1, None, None, SamplerConfig(steps=steps, guidance=False))
        assert np.max(np.abs(out - x1 * (1 - 1 / steps) ** steps)) <= 1e-12

    def test_time_grid(self):
        seen = []

        def record(x, t, lr, ref, lam):
            seen.append(t)
            return np.zeros_like(x)

        euler_sample(record, np.zeros(2), None, None, SamplerConfig(steps=4, guidance=False))
        assert seen == [1.0, 0.75, 0.5, 0.25]

    def test_guidance_calls_both_lambdas(self):
        lams = []

        def record(x, t, lr, ref, lam):
            lams.append(lam)
            return np.full_like(x, 1.0 if lam == 1.0 else 3.0)

        out = euler_sample(record, np.zeros(2), None, None, SamplerConfig(steps=2, omega=1.5))
        assert lams == [1.0, 0.0, 1.0, 0.0]
        # v = (1 - 1.5) * 3 + 1.5 * 1 = 0 at every step
        assert np.array_equal(out, np.zeros(2))

    def test_nan_reports_step(self):
        def bad(x, t, lr, ref, lam):
            return np.full_like(x, np.nan) if t < 0.6 else np.zeros_like(x)

        with pytest.raises(NumericError, match="step 2"):
            euler_sample(bad, np.zeros(2), None, None, SamplerConfig(steps=4, guidance=False))

    def test_shape_check(self):
        with pytest.raises(DimensionError):
            euler_sample(lambda *a: np.zeros(5), np.zeros(2), None, None,
                         SamplerConfig(steps=2, guidance=False))

    def test_dumps(self, tmp_path):
        euler_sample(constant_field(1.0), np.zeros((2, 2)), None, None,
                     SamplerConfig(steps=3, guidance=False, dump_dir=str(tmp_path)))
        assert len(list(tmp_path.glob("*.dtns"))) == 6
        last = T.read_dtns(tmp_path / "step002_xt.dtns")
        assert np.max(np.abs(last.data + 1.0)) <= 1e-15

    def test_defaults(self):
        cfg = SamplerConfig()
        assert (cfg.steps, cfg.omega, cfg.lambda_weak) == (DEFAULT_STEPS, DEFAULT_OMEGA, 0.0)
        assert (DEFAULT_STEPS, DEFAULT_OMEGA) == (40, 1.2)
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)


class TestAutoguide:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 3.0))
    def test_affine_identities(self, seed, omega):
        rng = SeededRng(seed)
        vs, vw = rng.normal((3, 2)), rng.normal((3, 2))
        out = autoguide(vs, vw, omega)
        assert np.max(np.abs(out - (vw + omega * (vs - vw)))) <= 1e-12
        assert np.array_equal(autoguide(vs, vw, 1.0), vs)
        assert np.array_equal(autoguide(vs, vw, 0.0), vw)
        assert np.max(np.abs(autoguide(vs, vs, omega) - vs)) <= 1e-12 * max(1.0, omega)

    def test_no_guidance_single_pass(self):
        calls = []

        def f(x, t, lr, ref, lam):
            calls.append(lam)
            return x

        guided_velocity(f, np.ones(2), 0.5, None, None, SamplerConfig(guidance=False))
        assert calls == [1.0]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            autoguide(np.zeros(2), np.zeros(3), 1.2)


def test_linear_field_closed_form_limit():
    """40 Euler steps on v = x approach exp(-1) within O(1/steps)."""
    x = euler_sample(linear_field, np.ones(1), None, None, SamplerConfig(steps=40, guidance=False))
    assert abs(x[0] - math.exp(-1)) <= 0.01
