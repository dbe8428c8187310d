"""Small problems with exact answers: a Gaussian target and an RBM fit to a mixture.

Both minimise ``KL(q || p)`` over the parameters of an undirected ``q`` with
one of the gradient estimators and record the exact KL along the way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .autodiff import Adam, Value
from .estimators import (EstimatorConfig, estimate_grad_gaussian, estimate_grad_rbm,
                         full_reparam_grad_gaussian, gaussian_from_raw, kl_objective,
                         raw_from_gaussian, reinforce_grad, toy_target)
from .relax import RelaxationConfig
from .ugm import (BernoulliMixture, BinaryState, GaussianUgm, RbmParams, joint_states,
                  kl_gaussian, kl_rbm_to_target, make_bit_mixture, mixture_log_prob,
                  mixture_log_prob_np, rbm_energy)

GAUSSIAN_METHODS = ("reinforce", "reparam", "term2", "term12")


@dataclass
class Curve:
    """KL recorded at ``iterations`` (0 is the starting point)."""

    method: str
    t: int
    seed: int
    iterations: np.ndarray
    kl: np.ndarray

    @property
    def final(self) -> float:
        return float(self.kl[-1])

    def first_below(self, level: float) -> int | None:
        hit = np.flatnonzero(self.kl < level)
        return int(self.iterations[hit[0]]) if len(hit) else None


def gaussian_start() -> np.ndarray:
    """Default starting point: unit-precision Gaussian at the origin."""
    return raw_from_gaussian(np.zeros(2), np.eye(2))


def gaussian_gradient(method: str, raw: Value, target: GaussianUgm, rng, t: int = 1,
                      n: int = 1, baseline: float = 0.0):
    """One estimate of ``d KL / d raw`` by ``method``; returns ``(grad, f_mean)``."""
    q = gaussian_from_raw(raw)
    f = kl_objective(q, target)
    wrt = {"raw": raw}
    if method == "reparam":
        est = full_reparam_grad_gaussian(f, q, rng, n, wrt)
    elif method == "reinforce":
        est = reinforce_grad(f, q, baseline, rng, n, wrt)
    elif method in ("term2", "term12"):
        cfg = EstimatorConfig(s=0, t=t, include_term_I=(method == "term12"))
        est = estimate_grad_gaussian(f, q, cfg, rng, n, wrt)
    else:
        raise ValueError(f"unknown method {method!r}")
    return est.grads["raw"], est.diagnostics.get("f_mean", 0.0)


def run_gaussian_toy(method: str, t: int = 1, seed: int = 0, iterations: int = 20_000,
                     lr: float = 0.01, n: int = 1, record_every: int = 100,
                     stop_below: float | None = None, baseline_decay: float = 0.9) -> Curve:
    """Minimise the toy KL with Adam and record the exact KL.

    ``stop_below`` ends the run at the first recorded KL under that level.
    REINFORCE uses a moving-average baseline of ``f``.
    """
    target = toy_target()
    rng = np.random.default_rng(seed)
    raw = Value(gaussian_start(), requires_grad=True)
    opt = Adam([raw], lr=lr)
    baseline = 0.0

    def kl_now():
        q = gaussian_from_raw(raw.data)
        return kl_gaussian(GaussianUgm(q.mu.data, q.Lam.data), target)

    its, kls = [0], [kl_now()]
    for it in range(1, iterations + 1):
        g, f_mean = gaussian_gradient(method, raw, target, rng, t, n, baseline)
        baseline = baseline_decay * baseline + (1 - baseline_decay) * f_mean
        opt.step({raw: g})
        if it % record_every == 0 or it == iterations:
            its.append(it)
            kls.append(kl_now())
            if stop_below is not None and kls[-1] < stop_below:
                break
    return Curve(method, t, seed, np.array(its), np.array(kls))


def analytic_kl_grad(raw: np.ndarray, target: GaussianUgm | None = None, h: float = 1e-6) -> np.ndarray:
    """Gradient of the closed-form KL in the raw parameters (central differences)."""
    target = toy_target() if target is None else target

    def kl(r):
        q = gaussian_from_raw(r)
        return kl_gaussian(GaussianUgm(q.mu.data, q.Lam.data), target)

    raw = np.asarray(raw, dtype=np.float64)
    return np.array([(kl(raw + h * e) - kl(raw - h * e)) / (2 * h) for e in np.eye(len(raw))])


# ---------------------------------------------------------------------------
# RBM fitted to a Bernoulli mixture
# ---------------------------------------------------------------------------

def mixture_target(seed: int = 0, n: int = 8, components: int = 3,
                   variance: float = 0.09) -> BernoulliMixture:
    return make_bit_mixture(n, components, np.random.default_rng(seed), variance)


def exact_kl_value(p: RbmParams, target_log_prob: np.ndarray) -> Value:
    """Differentiable ``KL(q_rbm || target)`` by enumeration."""
    z1, z2 = joint_states(p.n1, p.n2)
    neg_e = -rbm_energy(p, z1, z2)
    log_q = neg_e - ad.logsumexp(neg_e)
    return ad.sum_(ad.exp(log_q) * (log_q - target_log_prob))


def _unflatten(v, n1: int, n2: int) -> RbmParams:
    return RbmParams(v[:n1], v[n1:n1 + n2], v[n1 + n2:].reshape(n1, n2))


def global_min_kl(mix: BernoulliMixture, n1: int = 4, n2: int = 4, starts: int = 20,
                  seed: int = 0, scale: float = 2.0) -> tuple[float, RbmParams]:
    """Multi-start L-BFGS on the exact KL over all RBM parameters."""
    z1, z2 = joint_states(n1, n2)
    target = mixture_log_prob_np(mix, np.concatenate([z1, z2], axis=-1))
    rng = np.random.default_rng(seed)
    dim = n1 + n2 + n1 * n2

    def fun(v):
        leaf = Value(v, requires_grad=True)
        p = RbmParams(leaf[:n1], leaf[n1:n1 + n2], ad.reshape(leaf[n1 + n2:], (n1, n2)))
        kl = exact_kl_value(p, target)
        return kl.item(), ad.backward(kl)[leaf]

    best, best_v = np.inf, None
    for _ in range(starts):
        res = optimize.minimize(fun, rng.uniform(-scale, scale, dim), jac=True, method="L-BFGS-B",
                                options={"maxiter": 5000, "gtol": 1e-10, "ftol": 1e-14})
        if res.fun < best:
            best, best_v = float(res.fun), res.x
    return best, _unflatten(best_v, n1, n2)


def run_rbm_mixture_toy(t: int = 1, seed: int = 0, iterations: int = 10_000, lr: float = 0.003,
                        n1: int = 4, n2: int = 4, s: int = 10, n_chains: int = 256,
                        relaxation: RelaxationConfig | None = None, record_every: int = 100,
                        mixture_seed: int = 0) -> Curve:
    """Fit a 4+4 RBM to the mixture with the relaxed-Gibbs estimator.

    ``f(zeta) = -E_sg(phi)(zeta) - log p_mix(zeta)`` (the constant log Z is
    dropped); a batch of persistent chains supplies the equilibrium samples.
    """
    relaxation = RelaxationConfig() if relaxation is None else relaxation
    mix = mixture_target(mixture_seed, n1 + n2)
    z1s, z2s = joint_states(n1, n2)
    target_table = mixture_log_prob_np(mix, np.concatenate([z1s, z2s], axis=-1))
    rng = np.random.default_rng(seed)
    phi = RbmParams.random(n1, n2, rng, scale=0.1).leaves()
    leaves = {"b1": phi.b1, "b2": phi.b2, "W": phi.W}
    opt = Adam(leaves.values(), lr=lr)
    cfg = EstimatorConfig(s=s, t=t, relaxation=relaxation)
    chain = BinaryState((rng.random((n_chains, n1)) < 0.5) * 1.0,
                        (rng.random((n_chains, n2)) < 0.5) * 1.0)
    its, kls = [0], [kl_rbm_to_target(phi.numpy(), target_table)]
    for it in range(1, iterations + 1):
        frozen = phi.stop_gradient()

        def f(zeta1, zeta2, frozen=frozen):
            zeta = ad.concat([zeta1, zeta2], axis=-1)
            return -rbm_energy(frozen, zeta1, zeta2) - mixture_log_prob(mix, zeta)

        est = estimate_grad_rbm(f, phi, chain, cfg, rng)
        chain = est.chain
        opt.step({leaves[k]: est.grads[k] for k in leaves})
        if it % record_every == 0 or it == iterations:
            its.append(it)
            kls.append(kl_rbm_to_target(phi.numpy(), target_table))
    return Curve("relaxed-gibbs", t, seed, np.array(its), np.array(kls))
