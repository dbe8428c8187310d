import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ugmpost import autodiff as ad
from ugmpost.autodiff import Value, grad_check
from ugmpost.gibbs import gibbs_sweep
from ugmpost.relax import (RelaxationConfig, draw_sweep_noise, relax_bernoulli,
                           relaxed_gibbs_chain, relaxed_gibbs_sweep)
from ugmpost.ugm import BinaryState, RbmParams


class TestRelaxBernoulli:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            RelaxationConfig("gumbel")
        with pytest.raises(ValueError):
            RelaxationConfig("pwl", 0.0)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
    def test_noise_outside_unit_interval(self, eps):
        with pytest.raises(ValueError):
            relax_bernoulli(RelaxationConfig(), np.array([0.0]), np.array([eps]))

    def test_pwl_formula(self):
        # q = 0.5: clamp((eps - 0.5) / 0.1, 0, 1)
        out = relax_bernoulli(RelaxationConfig("pwl", 0.1), np.zeros(3), np.array([0.45, 0.55, 0.9]))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])

    def test_concrete_formula(self):
        out = relax_bernoulli(RelaxationConfig("concrete", 0.5), np.array([1.0]), np.array([0.3]))
        expected = 1 / (1 + np.exp(-(1.0 + np.log(0.3 / 0.7)) / 0.5))
        assert out.item() == pytest.approx(expected)

    @pytest.mark.parametrize("kind", ["pwl", "concrete"])
    def test_sharp_limit_is_threshold_rule(self, kind, rng):
        logits = rng.normal(size=2000) * 2
        eps = rng.uniform(0.01, 0.99, size=2000)
        hard = (eps > 1 / (1 + np.exp(logits))).astype(float)
        soft = relax_bernoulli(RelaxationConfig(kind, 1e-6), logits, eps).data
        # away from the threshold the relaxed value is already binary
        far = np.abs(eps - 1 / (1 + np.exp(logits))) > 1e-3
        np.testing.assert_allclose(soft[far], hard[far], atol=1e-6)

    def test_concrete_gradient(self, rng):
        eps = rng.uniform(0.05, 0.95, size=6)
        cfg = RelaxationConfig("concrete", 0.7)
        assert grad_check(lambda l: ad.sum_(relax_bernoulli(cfg, l, eps)), [rng.normal(size=6)]) < 1e-6


class TestRelaxedSweep:
    def test_matches_discrete_sweep_in_sharp_limit(self, rng):
        p = RbmParams.random(3, 4, rng)
        s = BinaryState((rng.random((50, 3)) < 0.5) * 1.0, (rng.random((50, 4)) < 0.5) * 1.0)
        (u1, u2), = draw_sweep_noise(rng, (50,), 3, 4, 1)
        hard = gibbs_sweep(p, s, uniforms=(u1, u2))
        z1, z2 = relaxed_gibbs_sweep(p, s.z2, RelaxationConfig("pwl", 1e-9), u1, u2)
        agree = np.mean(np.concatenate([z1.data, z2.data], -1) == hard.concat())
        assert agree > 0.999

    def test_gradient_through_chain(self, rng):
        n1, n2 = 2, 3
        p0 = RbmParams.random(n1, n2, rng)
        cond = (rng.random((4, n2)) < 0.5) * 1.0
        noise = draw_sweep_noise(rng, (4,), n1, n2, 3)
        cfg = RelaxationConfig("concrete", 0.8)

        def f(b1, b2, W):
            z1, z2 = relaxed_gibbs_chain(RbmParams(b1, b2, W), cond, cfg, noise)
            return ad.sum_(z1 * z1) + ad.sum_(ad.tanh(z2))

        assert grad_check(f, [p0.b1, p0.b2, p0.W]) < 1e-6

    def test_no_gradient_into_start_state(self, rng):
        p = RbmParams.random(2, 2, rng)
        cond = Value(np.ones((3, 2)), requires_grad=True)
        noise = draw_sweep_noise(rng, (3,), 2, 2, 1)
        z1, z2 = relaxed_gibbs_chain(p, cond, RelaxationConfig(), noise)
        assert not (ad.sum_(z2) + ad.sum_(z1)).requires_grad

    def test_needs_a_sweep(self, rng):
        with pytest.raises(ValueError):
            relaxed_gibbs_chain(RbmParams.zeros(1, 1), np.zeros(1), RelaxationConfig(), [])


@settings(max_examples=50, deadline=None)
@given(st.floats(-8, 8), st.floats(1e-6, 1 - 1e-6), st.sampled_from(["pwl", "concrete"]),
       st.floats(0.01, 2.0))
def test_relaxed_values_in_unit_interval(logit, eps, kind, sharp):
    v = relax_bernoulli(RelaxationConfig(kind, sharp), np.array([logit]), np.array([eps])).item()
    assert 0.0 <= v <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_monotone_in_noise(logit, e1, e2):
    cfg = RelaxationConfig("concrete", 0.5)
    lo, hi = sorted([e1, e2])
    a = relax_bernoulli(cfg, np.array([logit]), np.array([lo])).item()
    b = relax_bernoulli(cfg, np.array([logit]), np.array([hi])).item()
    assert a <= b + 1e-15
