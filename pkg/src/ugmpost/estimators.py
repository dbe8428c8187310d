"""Gradient estimators for expectations under undirected distributions.

The central estimator drops the score-function part of the gradient of
``E_q[f]`` and keeps only the pathwise part obtained by backpropagating
through ``t`` reparameterised Gibbs updates started from a (stop-gradient)
equilibrium sample.  The dropped part, REINFORCE and full reparameterisation
are provided for comparison.

All estimators return a :class:`GradEstimate` whose ``grads`` are keyed by the
names of the leaf Values passed as ``wrt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .gibbs import gibbs_sweep, reverse_sweep, run_sweeps
from .relax import RelaxationConfig, draw_sweep_noise, relaxed_gibbs_chain
from .ugm import (BinaryState, GaussianUgm, RbmParams, gaussian_log_density,
                  rbm_energy, rbm_logz_value, sample_exact, sample_gaussian)


@dataclass
class EstimatorConfig:
    s: int = 10
    t: int = 1
    include_term_I: bool = False
    relaxation: RelaxationConfig = field(default_factory=RelaxationConfig)

    def __post_init__(self):
        if self.s < 0 or self.t < 1:
            raise ValueError("need s >= 0 and t >= 1")


@dataclass
class GradEstimate:
    grads: dict
    diagnostics: dict = field(default_factory=dict)
    sample: object = None
    chain: BinaryState | None = None

    def flat(self, names=None) -> np.ndarray:
        names = list(self.grads) if names is None else names
        return np.concatenate([np.ravel(self.grads[k]) for k in names])


def _default_wrt(q) -> dict:
    if isinstance(q, GaussianUgm):
        return {"mu": q.mu, "Lam": q.Lam}
    return {"b1": q.b1, "b2": q.b2, "W": q.W}


def _collect(root: Value, wrt: dict) -> dict:
    if not np.isfinite(root.data):
        raise FloatingPointError("objective is not finite")
    g = ad.backward(root) if root.requires_grad else {}
    return {k: np.array(g.get(v, np.zeros(np.shape(ad.to_numpy(v))))) for k, v in wrt.items()}


def _mean(v) -> Value:
    v = ad.as_value(v)
    return ad.mean(v) if v.ndim else v


# ---------------------------------------------------------------------------
# discrete (RBM) case
# ---------------------------------------------------------------------------

def estimate_grad_rbm(f: Callable, phi: RbmParams, chain: BinaryState, cfg: EstimatorConfig,
                      rng, wrt: dict | None = None) -> GradEstimate:
    """Relaxed-Gibbs pathwise estimate of ``d/dphi E_q[f(z1, z2)]``.

    The chain is advanced ``cfg.s`` discrete sweeps (no gradient), then
    ``cfg.t`` relaxed sweeps are differentiated.  ``f`` maps the relaxed pair
    ``(zeta1, zeta2)`` (batched) to per-sample values; the batch mean is
    differentiated.  The relaxed sample is returned for reuse.
    """
    wrt = _default_wrt(phi) if wrt is None else wrt
    chain = run_sweeps(phi.numpy(), chain, cfg.s, rng)
    batch = chain.z1.shape[:-1]
    noise = draw_sweep_noise(rng, batch, phi.n1, phi.n2, cfg.t)
    zeta1, zeta2 = relaxed_gibbs_chain(phi, chain.z2, cfg.relaxation, noise)
    objective = _mean(f(zeta1, zeta2))
    if cfg.include_term_I:
        # discrete chain driven by the same thresholds as the relaxed one
        z = chain
        for u in noise:
            z = gibbs_sweep(phi.numpy(), z, uniforms=u)
        fz = ad.to_numpy(f(Value(z.z1), Value(z.z2)))
        objective = objective + _term_I_surrogate_rbm(fz, z, phi, cfg.t, rng)
    grads = _collect(objective, wrt)
    return GradEstimate(grads, {"samples": int(np.prod(batch))},
                        sample=(zeta1, zeta2), chain=chain)


def _term_I_surrogate_rbm(fz, z: BinaryState, phi: RbmParams, t: int, rng) -> Value:
    back = z
    for _ in range(t):
        back = reverse_sweep(phi.numpy(), back, rng)
    log_q = -rbm_energy(phi, back.z1, back.z2) - rbm_logz_value(phi)
    return _mean(ad.as_value(fz) * log_q)


# ---------------------------------------------------------------------------
# Gaussian case
# ---------------------------------------------------------------------------

def _coordinate_update(q: GaussianUgm, cols: list, i: int, eps) -> Value:
    """Reparameterised draw of coordinate ``i`` given the others."""
    lam = ad.as_value(q.Lam)
    mu = ad.as_value(q.mu)
    lii = lam[i, i]
    shift = 0.0
    for j, zj in enumerate(cols):
        if j != i:
            shift = shift + lam[i, j] * (zj - mu[j])
    return mu[i] - shift / lii + eps / ad.sqrt(lii)


def gaussian_gibbs_chain(q: GaussianUgm, z_start: np.ndarray, t: int, eps: np.ndarray,
                         reverse: bool = False) -> Value:
    """``t`` systematic-scan sweeps of single-coordinate conditionals.

    ``eps`` has shape ``(t, n, d)``.  With ``reverse=True`` each sweep visits
    the coordinates in the opposite order.
    """
    d = q.dim
    cols = [Value(z_start[:, j]) for j in range(d)]
    order = range(d - 1, -1, -1) if reverse else range(d)
    for k in range(t):
        for i in order:
            cols[i] = _coordinate_update(q, cols, i, eps[k, :, i])
    return ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=-1)


def estimate_grad_gaussian(f: Callable, q: GaussianUgm, cfg: EstimatorConfig, rng,
                           n: int = 1, wrt: dict | None = None) -> GradEstimate:
    """Pathwise estimate through ``cfg.t`` reparameterised Gibbs sweeps.

    The starting point is an exact draw from the current ``q`` (no gradient).
    With ``cfg.include_term_I`` the reverse-kernel score term is added.
    """
    wrt = _default_wrt(q) if wrt is None else wrt
    qn = GaussianUgm(ad.to_numpy(q.mu), ad.to_numpy(q.Lam))
    z0 = sample_gaussian(qn, n, rng)
    eps = rng.standard_normal((cfg.t, n, q.dim))
    z = gaussian_gibbs_chain(q, z0, cfg.t, eps)
    objective = _mean(f(z))
    if cfg.include_term_I:
        objective = objective + _term_I_surrogate_gauss(f, q, z.data, cfg.t, rng)
    grads = _collect(objective, wrt)
    return GradEstimate(grads, {"samples": n}, sample=z.data)


def _term_I_surrogate_gauss(f, q: GaussianUgm, z: np.ndarray, t: int, rng,
                            fresh: bool = False) -> Value:
    fz = ad.to_numpy(f(Value(z)))
    qn = GaussianUgm(ad.to_numpy(q.mu), ad.to_numpy(q.Lam))
    if fresh:
        back = sample_gaussian(qn, len(z), rng)
    else:
        eps = rng.standard_normal((t, len(z), q.dim))
        back = gaussian_gibbs_chain(qn, z, t, eps, reverse=True).data
    return _mean(fz * gaussian_log_density(q, back))


def estimate_term_I(f: Callable, q, cfg: EstimatorConfig, rng, n: int = 1,
                    wrt: dict | None = None, z=None, fresh: bool = False) -> GradEstimate:
    """Score-function term ``f(z) * d/dphi log q(z')`` with ``z' ~ K_rev^t(.|z)``.

    ``z`` defaults to an exact draw from ``q`` (equilibrium).  ``fresh=True``
    replaces the reverse chain by an independent draw from ``q``, the
    ``t -> infinity`` limit in which the term vanishes in expectation.
    Uses exact ``log Z`` (closed form or enumeration).
    """
    wrt = _default_wrt(q) if wrt is None else wrt
    if isinstance(q, GaussianUgm):
        qn = GaussianUgm(ad.to_numpy(q.mu), ad.to_numpy(q.Lam))
        z = sample_gaussian(qn, n, rng) if z is None else z
        objective = _term_I_surrogate_gauss(f, q, z, cfg.t, rng, fresh=fresh)
        return GradEstimate(_collect(objective, wrt), {"samples": len(z)})
    z = sample_exact(q.numpy(), n, rng) if z is None else z
    fz = ad.to_numpy(f(Value(z.z1), Value(z.z2)))
    if fresh:
        back = sample_exact(q.numpy(), len(fz), rng)
        log_q = -rbm_energy(q, back.z1, back.z2) - rbm_logz_value(q)
        objective = _mean(fz * log_q)
    else:
        objective = _term_I_surrogate_rbm(fz, z, q, cfg.t, rng)
    return GradEstimate(_collect(objective, wrt), {"samples": len(fz)})


def reinforce_grad(f: Callable, q, baseline: float, rng, n: int = 1,
                   wrt: dict | None = None) -> GradEstimate:
    """``(f(z) - baseline) * d/dphi log q(z)`` with exact draws ``z ~ q``.

    ``diagnostics["f_mean"]`` feeds a caller-side moving-average baseline.
    """
    wrt = _default_wrt(q) if wrt is None else wrt
    if isinstance(q, GaussianUgm):
        qn = GaussianUgm(ad.to_numpy(q.mu), ad.to_numpy(q.Lam))
        z = sample_gaussian(qn, n, rng)
        fz = ad.to_numpy(f(Value(z)))
        log_q = gaussian_log_density(q, z)
    else:
        z = sample_exact(q.numpy(), n, rng)
        fz = ad.to_numpy(f(Value(z.z1), Value(z.z2)))
        log_q = -rbm_energy(q, z.z1, z.z2) - rbm_logz_value(q)
    objective = _mean((fz - baseline) * log_q)
    return GradEstimate(_collect(objective, wrt), {"samples": n, "f_mean": float(np.mean(fz))})


def full_reparam_grad_gaussian(f: Callable, q: GaussianUgm, rng, n: int = 1,
                               wrt: dict | None = None) -> GradEstimate:
    """Direct reparameterisation ``z = mu + L^{-T} eps`` with ``Lam = L L^T``."""
    wrt = _default_wrt(q) if wrt is None else wrt
    eps = rng.standard_normal((q.dim, n))
    low = ad.cholesky(q.Lam)
    z = ad.as_value(q.mu) + ad.transpose(ad.solve(ad.transpose(low), eps))
    objective = _mean(f(z))
    return GradEstimate(_collect(objective, wrt), {"samples": n}, sample=z.data)


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    bias_l2: float
    mean_variance: float
    l2_errors: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray


def grad_probe(estimator: Callable[[], np.ndarray], reference: np.ndarray,
               trials: int) -> ProbeResult:
    """Summary statistics of ``trials`` independent estimator calls.

    ``estimator()`` returns a flat gradient vector.
    """
    reference = np.ravel(reference)
    draws = np.array([np.ravel(estimator()) for _ in range(trials)])
    mean = draws.mean(axis=0)
    var = draws.var(axis=0, ddof=1) if trials > 1 else np.zeros_like(mean)
    return ProbeResult(
        bias_l2=float(np.linalg.norm(mean - reference)),
        mean_variance=float(var.mean()),
        l2_errors=np.linalg.norm(draws - reference, axis=1),
        mean=mean,
        stderr=np.sqrt(var / trials),
    )


# ---------------------------------------------------------------------------
# the two-dimensional Gaussian toy problem
# ---------------------------------------------------------------------------

TOY_MU = np.array([1.0, 1.0])
TOY_LAMBDA = np.array([[1.1, 0.9], [0.9, 1.1]])


def toy_target() -> GaussianUgm:
    return GaussianUgm(TOY_MU.copy(), TOY_LAMBDA.copy())


def gaussian_from_raw(raw) -> GaussianUgm:
    """Map ``[mu (d), log-diagonal and lower entries of L]`` to ``(mu, L L^T)``.

    For ``d = 2`` the layout is ``[mu1, mu2, log L11, L21, log L22]``.
    """
    raw = ad.as_value(raw)
    n = raw.shape[0]
    d = int(round((-3 + np.sqrt(9 + 8 * n)) / 2))
    mu = raw[:d]
    rows = []
    k = d
    for i in range(d):
        entries = []
        for j in range(d):
            if j < i:
                entries.append(ad.reshape(raw[k], (1,)))
                k += 1
            elif j == i:
                entries.append(ad.reshape(ad.exp(raw[k]), (1,)))
                k += 1
            else:
                entries.append(Value(np.zeros(1)))
        rows.append(ad.reshape(ad.concat(entries), (1, d)))
    low = ad.concat(rows, axis=0)
    lam = ad.matmul(low, ad.transpose(low))
    return GaussianUgm(mu, lam)


def raw_from_gaussian(mu, lam) -> np.ndarray:
    low = np.linalg.cholesky(np.asarray(lam, dtype=np.float64))
    d = len(mu)
    out = list(np.asarray(mu, dtype=np.float64))
    for i in range(d):
        for j in range(i + 1):
            out.append(np.log(low[i, j]) if i == j else low[i, j])
    return np.array(out)


def kl_objective(q_now: GaussianUgm, p: GaussianUgm) -> Callable:
    """``f(z) = log q_now(z) - log p(z)`` with ``q_now`` frozen (numbers only)."""
    qn = GaussianUgm(ad.to_numpy(q_now.mu), ad.to_numpy(q_now.Lam))

    def f(z):
        return gaussian_log_density(qn, z) - gaussian_log_density(p, z)

    return f
