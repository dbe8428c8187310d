import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ugmpost.gibbs import (AnnealPath, ChainStore, ais_logz, bernoulli_from_uniform,
                           effective_sample_size, fixed_point_violation, gibbs_kernel_matrix,
                           gibbs_sweep, multinomial_resample, reverse_kernel_matrix,
                           reverse_sweep, run_sweeps, sample_prior, update_persistent,
                           verify_balance)
from ugmpost.ugm import (BinaryState, EnumerationError, RbmParams, rbm_exact_distribution,
                         rbm_exact_logz, state_index)


class TestKernels:
    @pytest.mark.parametrize("n1,n2", [(1, 1), (2, 3), (3, 2)])
    def test_columns_are_distributions(self, n1, n2, rng):
        p = RbmParams.random(n1, n2, rng)
        # rows index the source state
        np.testing.assert_allclose(gibbs_kernel_matrix(p).sum(axis=1), 1.0)
        np.testing.assert_allclose(reverse_kernel_matrix(p).sum(axis=1), 1.0)

    def test_stationary(self, rng):
        p = RbmParams.random(2, 2, rng, scale=2.0)
        q = rbm_exact_distribution(p)
        np.testing.assert_allclose(q @ gibbs_kernel_matrix(p), q, atol=1e-14)
        assert fixed_point_violation(p) < 1e-14

    def test_balance_between_forward_and_reverse(self, rng):
        p = RbmParams.random(3, 2, rng, scale=2.0)
        q = rbm_exact_distribution(p)
        K, R = gibbs_kernel_matrix(p), reverse_kernel_matrix(p)
        # q(z') K(z|z') = q(z) R(z'|z), with K[z', z] and R[z, z']
        np.testing.assert_allclose(K * q[:, None], (R * q[:, None]).T, atol=1e-14)
        assert verify_balance(p) < 1e-14

    def test_balance_size_limit(self):
        with pytest.raises(EnumerationError):
            verify_balance(RbmParams.zeros(7, 6))

    def test_empirical_sweep_matches_kernel(self, rng):
        p = RbmParams.random(1, 2, rng)
        start = BinaryState(np.tile([1.0], (50_000, 1)), np.tile([0.0, 1.0], (50_000, 1)))
        out = gibbs_sweep(p, start, rng)
        counts = np.bincount(state_index(out.z1, out.z2), minlength=8)
        col = gibbs_kernel_matrix(p)[state_index(start.z1[:1], start.z2[:1])[0]]
        assert stats.chisquare(counts, 50_000 * col).pvalue > 1e-3

    def test_reverse_sweep_matches_kernel(self, rng):
        p = RbmParams.random(2, 1, rng)
        start = BinaryState(np.tile([0.0, 1.0], (50_000, 1)), np.tile([1.0], (50_000, 1)))
        out = reverse_sweep(p, start, rng)
        counts = np.bincount(state_index(out.z1, out.z2), minlength=8)
        row = reverse_kernel_matrix(p)[state_index(start.z1[:1], start.z2[:1])[0]]
        assert stats.chisquare(counts, 50_000 * row).pvalue > 1e-3

    def test_threshold_rule(self):
        logits = np.array([0.0, 0.0, 10.0])
        u = np.array([0.4, 0.6, 0.01])
        np.testing.assert_array_equal(bernoulli_from_uniform(logits, u), [0.0, 1.0, 1.0])

    def test_fixed_uniforms_are_deterministic(self, rng):
        p = RbmParams.random(3, 3, rng)
        s = BinaryState(np.zeros((4, 3)), np.ones((4, 3)))
        u = (rng.random((4, 3)), rng.random((4, 3)))
        a, b = gibbs_sweep(p, s, uniforms=u), gibbs_sweep(p, s, uniforms=u)
        np.testing.assert_array_equal(a.concat(), b.concat())

    def test_long_chain_converges(self, rng):
        p = RbmParams.random(2, 2, rng)
        s = BinaryState(np.zeros((20_000, 2)), np.zeros((20_000, 2)))
        s = run_sweeps(p, s, 20, rng)
        counts = np.bincount(state_index(s.z1, s.z2), minlength=16)
        assert stats.chisquare(counts, 20_000 * rbm_exact_distribution(p)).pvalue > 1e-3


class TestChainStore:
    def test_roundtrip(self, tmp_path, rng):
        store = ChainStore(3, 5, seed=7)
        p = RbmParams.random(3, 5, rng)
        update_persistent(store, [4, 10, 2], p, 3)
        store.save(tmp_path / "c.bin")
        back = ChainStore.load(tmp_path / "c.bin", seed=7)
        for k in (2, 4, 10):
            np.testing.assert_array_equal(back.states[k].concat(), store.states[k].concat())

    def test_order_independent(self, rng):
        p = RbmParams.random(2, 2, rng)
        a, b = ChainStore(2, 2, seed=1), ChainStore(2, 2, seed=1)
        sa = update_persistent(a, [0, 1, 2], p, 5)
        sb = update_persistent(b, [2, 0, 1], p, 5)
        np.testing.assert_array_equal(sa.concat()[[2, 0, 1]], sb.concat())

    def test_batched_params_must_match(self, rng):
        store = ChainStore(2, 2)
        p = RbmParams(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2, 2)))
        with pytest.raises(ValueError):
            update_persistent(store, [0, 1], p, 1)

    def test_bad_file(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            ChainStore.load(tmp_path / "x.bin")

    def test_truncated_file(self, tmp_path, rng):
        store = ChainStore(2, 2)
        update_persistent(store, [0, 1], RbmParams.zeros(2, 2), 1)
        store.save(tmp_path / "c.bin")
        blob = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(blob[:-3])
        with pytest.raises(ValueError, match="truncated"):
            ChainStore.load(tmp_path / "c.bin")


class TestAnnealing:
    def test_path_validation(self):
        with pytest.raises(ValueError):
            AnnealPath(1)
        with pytest.raises(ValueError):
            AnnealPath(3, betas=np.array([0.0, 0.7, 0.5, 1.0]))
        with pytest.raises(ValueError):
            AnnealPath(3, population_size=1)

    def test_independent_rbm_is_exact(self, rng):
        p = RbmParams(rng.normal(size=4), rng.normal(size=3), np.zeros((4, 3)))
        est = ais_logz(p, AnnealPath(2, 16), rng)
        assert est.mean == pytest.approx(rbm_exact_logz(p), abs=1e-12)

    def test_accuracy_small_rbm(self, rng):
        p = RbmParams.random(5, 5, rng)
        est = ais_logz(p, AnnealPath(200, 256), rng, repeats=4)
        assert abs(est.mean - rbm_exact_logz(p)) < 0.02
        assert est.repeats.shape == (4,)

    def test_ess_bounds(self):
        assert effective_sample_size(np.zeros(10)) == pytest.approx(10.0)
        assert effective_sample_size(np.array([0.0, -np.inf, -np.inf])) == pytest.approx(1.0)

    def test_resample_degenerate(self, rng):
        idx = multinomial_resample(np.array([-np.inf, 0.0, -np.inf]), rng)
        np.testing.assert_array_equal(idx, [1, 1, 1])

    def test_sample_prior_distribution(self, rng):
        p = RbmParams.random(2, 2, rng, scale=1.5)
        s, lz = sample_prior(p, AnnealPath(50, 4000), 4000, rng, return_logz=True)
        counts = np.bincount(state_index(s.z1, s.z2), minlength=16)
        assert stats.chisquare(counts, 4000 * rbm_exact_distribution(p)).pvalue > 1e-4
        assert lz == pytest.approx(rbm_exact_logz(p), abs=0.05)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_balance_property(n1, n2, seed):
    p = RbmParams.random(n1, n2, np.random.default_rng(seed), scale=2.0)
    assert verify_balance(p) < 1e-12
    assert fixed_point_violation(p) < 1e-12
