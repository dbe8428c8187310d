import numpy as np
import pytest

from ugmpost import autodiff as ad
from ugmpost.autodiff import Value
from ugmpost.estimators import gaussian_from_raw, toy_target
from ugmpost.toys import (analytic_kl_grad, exact_kl_value, gaussian_gradient, gaussian_start,
                          global_min_kl, mixture_target, run_gaussian_toy, run_rbm_mixture_toy)
from ugmpost.ugm import RbmParams, joint_states, kl_gaussian, kl_rbm_to_target, mixture_log_prob_np


class TestGaussianToy:
    def test_start_kl(self):
        q = gaussian_from_raw(gaussian_start())
        assert q.Lam.data == pytest.approx(np.eye(2))
        curve = run_gaussian_toy("reparam", iterations=1, record_every=1)
        assert curve.kl[0] == pytest.approx(kl_gaussian(q, toy_target()))

    def test_analytic_grad_matches_autodiff(self):
        raw = np.array([0.1, -0.3, 0.2, 0.4, -0.1])
        leaf = Value(raw, requires_grad=True)
        q = gaussian_from_raw(leaf)
        t = toy_target()
        # closed-form KL written with autodiff ops
        lam_q, lam_p = q.Lam, t.Lam
        cov_q = ad.solve(lam_q, np.eye(2))
        d = q.mu - t.mu
        lq = ad.cholesky(lam_q)
        logdet_q = 2 * ad.sum_(ad.log(ad.slice_(lq, (np.arange(2), np.arange(2)))))
        kl = 0.5 * (ad.sum_(ad.matmul(lam_p, cov_q) * np.eye(2)) + ad.sum_(ad.matmul(ad.reshape(d, (1, 2)), lam_p) * d)
                    - 2 + logdet_q - np.log(np.linalg.det(lam_p)))
        g = ad.backward(kl)[leaf]
        np.testing.assert_allclose(analytic_kl_grad(raw), g, atol=1e-7)

    def test_unknown_method(self, rng):
        with pytest.raises(ValueError):
            gaussian_gradient("vimco", Value(gaussian_start(), True), toy_target(), rng)

    @pytest.mark.parametrize("method", ["reinforce", "reparam", "term2", "term12"])
    def test_kl_decreases(self, method):
        c = run_gaussian_toy(method, iterations=600, record_every=100)
        assert c.kl[-1] < 0.5 * c.kl[0]
        assert list(c.iterations) == [0, 100, 200, 300, 400, 500, 600]

    def test_stop_below(self):
        c = run_gaussian_toy("reparam", iterations=5000, record_every=50, stop_below=0.1)
        assert c.kl[-1] < 0.1 and c.iterations[-1] < 5000
        assert c.first_below(0.1) == c.iterations[-1]


class TestMixtureToy:
    def test_oracle_beats_random_rbm(self):
        mix = mixture_target(0)
        best, p = global_min_kl(mix, starts=3)
        z1, z2 = joint_states(4, 4)
        table = mixture_log_prob_np(mix, np.concatenate([z1, z2], -1))
        assert best == pytest.approx(kl_rbm_to_target(p, table), abs=1e-10)
        rnd = RbmParams.random(4, 4, np.random.default_rng(0))
        assert 0.0 <= best < kl_rbm_to_target(rnd, table)

    def test_exact_kl_value(self):
        mix = mixture_target(1)
        p = RbmParams.random(4, 4, np.random.default_rng(2))
        z1, z2 = joint_states(4, 4)
        table = mixture_log_prob_np(mix, np.concatenate([z1, z2], -1))
        assert exact_kl_value(p, table).item() == pytest.approx(kl_rbm_to_target(p, table))

    def test_training_reduces_kl(self):
        c = run_rbm_mixture_toy(t=1, iterations=300, lr=0.01, n_chains=16, record_every=100)
        assert c.kl[-1] < c.kl[0]
