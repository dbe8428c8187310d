"""Energy models: bipartite binary RBMs, Gaussian UGMs and Bernoulli mixtures.

Sign convention everywhere: ``q(z) = exp(-E(z)) / Z`` with the RBM energy
``E(z1, z2) = b1.z1 + b2.z2 + z1^T W z2``.  The conditional logit of a unit
is therefore ``-(b + W z)``.

Parameters may be plain arrays or :class:`~ugmpost.autodiff.Value` nodes, and
may carry leading batch dimensions (one RBM per training example).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Value

ENUM_CAP = 20


class EnumerationError(ValueError):
    """The requested exact computation exceeds the enumeration cap."""


@lru_cache(maxsize=32)
def enumerate_states(n: int) -> np.ndarray:
    """All ``2**n`` binary vectors of length ``n``, first bit most significant."""
    codes = np.arange(2 ** n, dtype=np.int64)
    states = (codes[:, None] >> np.arange(n - 1, -1, -1)) & 1
    out = states.astype(np.float64)
    out.setflags(write=False)
    return out


@dataclass
class RbmParams:
    """Linear biases and coupling of an RBM (arrays or Values)."""

    b1: object
    b2: object
    W: object

    def __post_init__(self):
        s1, s2, sw = np.shape(_np(self.b1)), np.shape(_np(self.b2)), np.shape(_np(self.W))
        if sw[-2:] != (s1[-1], s2[-1]):
            raise ValueError(f"inconsistent RBM shapes b1{s1} b2{s2} W{sw}")

    @property
    def n1(self) -> int:
        return np.shape(_np(self.b1))[-1]

    @property
    def n2(self) -> int:
        return np.shape(_np(self.b2))[-1]

    @property
    def batch_shape(self) -> tuple:
        return np.shape(_np(self.W))[:-2]

    def numpy(self) -> "RbmParams":
        return RbmParams(_np(self.b1), _np(self.b2), _np(self.W))

    def stop_gradient(self) -> "RbmParams":
        return RbmParams(ad.stop_gradient(self.b1), ad.stop_gradient(self.b2),
                         ad.stop_gradient(self.W))

    def leaves(self, requires_grad: bool = True) -> "RbmParams":
        """Fresh leaf Values holding copies of the current parameters."""
        return RbmParams(Value(_np(self.b1), requires_grad),
                         Value(_np(self.b2), requires_grad),
                         Value(_np(self.W), requires_grad))

    def select(self, index) -> "RbmParams":
        """Pick batch entries of an amortized (batched) parameter set."""
        p = self.numpy()
        return RbmParams(p.b1[index], p.b2[index], p.W[index])

    @classmethod
    def zeros(cls, n1: int, n2: int) -> "RbmParams":
        return cls(np.zeros(n1), np.zeros(n2), np.zeros((n1, n2)))

    @classmethod
    def random(cls, n1: int, n2: int, rng, scale: float = 1.0,
               bias_scale: float | None = None) -> "RbmParams":
        """Uniform entries in ``[-scale, scale]`` (biases use ``bias_scale``)."""
        bs = scale if bias_scale is None else bias_scale
        return cls(rng.uniform(-bs, bs, n1), rng.uniform(-bs, bs, n2),
                   rng.uniform(-scale, scale, (n1, n2)))


@dataclass
class BinaryState:
    """A (possibly batched) joint state of both RBM layers."""

    z1: np.ndarray
    z2: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.z1, self.z2], axis=-1)

    def copy(self) -> "BinaryState":
        return BinaryState(np.array(self.z1, dtype=np.float64), np.array(self.z2, dtype=np.float64))


@dataclass
class GaussianUgm:
    """Gaussian energy ``E(z) = (z - mu)^T Lam (z - mu) / 2`` (precision form)."""

    mu: object
    Lam: object

    def __post_init__(self):
        lam = _np(self.Lam)
        if lam.shape != (len(_np(self.mu)),) * 2:
            raise ValueError("Lambda must be d x d")
        if not np.allclose(lam, lam.T, atol=1e-12):
            raise ValueError("Lambda must be symmetric")

    @property
    def dim(self) -> int:
        return len(_np(self.mu))

    def covariance(self) -> np.ndarray:
        lam = _np(self.Lam)
        _chol_np(lam)
        return np.linalg.inv(lam)


@dataclass
class BernoulliMixture:
    """``p(z) = sum_i alpha_i prod_a Bernoulli(z_a; sigmoid(nu_ia))``."""

    weights: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("mixture weights must lie on the simplex")
        if self.logits.shape[0] != self.weights.shape[0]:
            raise ValueError("one logit row per component")

    @property
    def n(self) -> int:
        return self.logits.shape[1]


def _np(x):
    return ad.to_numpy(x)


def _chol_np(lam: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(lam)
    except np.linalg.LinAlgError as exc:
        raise ValueError("precision matrix is not positive definite") from exc


# ---------------------------------------------------------------------------
# RBM
# ---------------------------------------------------------------------------

def _coupling(z1, W, z2):
    """``z1^T W z2`` over leading batch dims (differentiable)."""
    z1, W, z2 = ad.as_value(z1), ad.as_value(W), ad.as_value(z2)
    z1e = ad.reshape(z1, z1.shape + (1,))
    z2e = ad.reshape(z2, z2.shape[:-1] + (1,) + z2.shape[-1:])
    return ad.sum_(z1e * W * z2e, axis=(-2, -1))


def rbm_energy(p: RbmParams, z1, z2) -> Value:
    """``b1.z1 + b2.z2 + z1^T W z2``, reduced over the unit axes."""
    if np.shape(_np(z1))[-1] != p.n1 or np.shape(_np(z2))[-1] != p.n2:
        raise ValueError("state shape does not match RBM")
    lin = ad.sum_(ad.as_value(p.b1) * z1, axis=-1) + ad.sum_(ad.as_value(p.b2) * z2, axis=-1)
    return lin + _coupling(z1, p.W, z2)


def rbm_energy_np(p: RbmParams, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    b1, b2, W = _np(p.b1), _np(p.b2), _np(p.W)
    return (b1 * z1).sum(-1) + (b2 * z2).sum(-1) + np.einsum("...i,...ij,...j->...", z1, W, z2)


def rbm_cond_logits(p: RbmParams, side: int, other) -> Value:
    """Logits of the factorial conditional of layer ``side`` (1 or 2)."""
    other = ad.as_value(other)
    W = ad.as_value(p.W)
    if side == 1:
        if other.shape[-1] != p.n2:
            raise ValueError("conditioning state must match layer 2")
        field = ad.sum_(W * ad.reshape(other, other.shape[:-1] + (1, p.n2)), axis=-1)
        return -(ad.as_value(p.b1) + field)
    if side == 2:
        if other.shape[-1] != p.n1:
            raise ValueError("conditioning state must match layer 1")
        field = ad.sum_(W * ad.reshape(other, other.shape + (1,)), axis=-2)
        return -(ad.as_value(p.b2) + field)
    raise ValueError(f"side must be 1 or 2, got {side!r}")


def cond_logits_np(p: RbmParams, side: int, other: np.ndarray) -> np.ndarray:
    b1, b2, W = _np(p.b1), _np(p.b2), _np(p.W)
    if side == 1:
        return -(b1 + np.einsum("...ij,...j->...i", W, other))
    if side == 2:
        return -(b2 + np.einsum("...ij,...i->...j", W, other))
    raise ValueError(f"side must be 1 or 2, got {side!r}")


def rbm_exact_logz(p: RbmParams, side: int | None = None) -> np.ndarray:
    """Exact log partition function by enumerating one layer.

    The other layer is summed analytically, e.g. for ``side=2``
    ``log Z = logsumexp_{z2} [-b2.z2 + sum_i softplus(-(b1 + W z2)_i)]``.
    By default the smaller layer is enumerated.  Works over batch dims.
    """
    p = p.numpy()
    if side is None:
        side = 1 if p.n1 <= p.n2 else 2
    n = p.n1 if side == 1 else p.n2
    if n > ENUM_CAP:
        raise EnumerationError(f"cannot enumerate {n} units (cap {ENUM_CAP})")
    S = enumerate_states(n)
    if side == 1:
        field = -(p.b2[..., None, :] + np.einsum("sk,...kj->...sj", S, p.W))
        terms = -np.einsum("sk,...k->...s", S, p.b1) + np.logaddexp(0.0, field).sum(-1)
    else:
        field = -(p.b1[..., None, :] + np.einsum("...ik,sk->...si", p.W, S))
        terms = -np.einsum("sk,...k->...s", S, p.b2) + np.logaddexp(0.0, field).sum(-1)
    return special.logsumexp(terms, axis=-1)


def rbm_logz_value(p: RbmParams) -> Value:
    """Differentiable exact log Z (single RBM or batch), enumerating layer 1."""
    n1 = p.n1
    if n1 > ENUM_CAP:
        raise EnumerationError(f"cannot enumerate {n1} units (cap {ENUM_CAP})")
    S = enumerate_states(n1)
    W = ad.as_value(p.W)
    field = -(ad.reshape(ad.as_value(p.b2), W.shape[:-2] + (1, p.n2)) + ad.matmul(S, W))
    b1 = ad.as_value(p.b1)
    lin = ad.matmul(ad.reshape(b1, b1.shape[:-1] + (1, n1)), S.T)
    lin = ad.reshape(lin, lin.shape[:-2] + (S.shape[0],))
    terms = -lin + ad.sum_(ad.softplus(field), axis=-1)
    return ad.logsumexp(terms, axis=-1)


def rbm_exact_distribution(p: RbmParams) -> np.ndarray:
    """Probability of every joint state, indexed ``z1_code * 2**n2 + z2_code``."""
    p = p.numpy()
    if p.n1 + p.n2 > ENUM_CAP:
        raise EnumerationError(f"{p.n1 + p.n2} units exceed cap {ENUM_CAP}")
    S1, S2 = enumerate_states(p.n1), enumerate_states(p.n2)
    neg_e = -(S1 @ p.b1)[:, None] - (S2 @ p.b2)[None, :] - S1 @ p.W @ S2.T
    probs = np.exp(neg_e - special.logsumexp(neg_e))
    return probs.reshape(-1)


def rbm_log_prob_table(p: RbmParams) -> np.ndarray:
    """Exact ``log q(z)`` for every joint state (same indexing as the distribution)."""
    p = p.numpy()
    S1, S2 = enumerate_states(p.n1), enumerate_states(p.n2)
    neg_e = -(S1 @ p.b1)[:, None] - (S2 @ p.b2)[None, :] - S1 @ p.W @ S2.T
    return (neg_e - special.logsumexp(neg_e)).reshape(-1)


def joint_states(n1: int, n2: int) -> tuple[np.ndarray, np.ndarray]:
    """``(z1, z2)`` arrays of all joint states in distribution order."""
    S1, S2 = enumerate_states(n1), enumerate_states(n2)
    return np.repeat(S1, len(S2), axis=0), np.tile(S2, (len(S1), 1))


def rbm_marginals(p: RbmParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact unit marginals ``P(z1_i = 1)`` and ``P(z2_j = 1)``."""
    probs = rbm_exact_distribution(p)
    z1, z2 = joint_states(p.n1, p.n2)
    return probs @ z1, probs @ z2


def state_index(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """Joint-state code of binary states, matching :func:`rbm_exact_distribution`."""
    bits = np.concatenate([z1, z2], axis=-1).astype(np.int64)
    weights = 1 << np.arange(bits.shape[-1] - 1, -1, -1)
    return bits @ weights


# ---------------------------------------------------------------------------
# Gaussian UGM
# ---------------------------------------------------------------------------

def gaussian_conditional(g: GaussianUgm, block, other_values) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``z_A | z_B`` for index block ``A``.

    Conditional precision is ``Lam_AA``; the mean is
    ``mu_A - Lam_AA^{-1} Lam_AB (z_B - mu_B)``.
    """
    mu, lam = _np(g.mu), _np(g.Lam)
    A = np.atleast_1d(np.asarray(block, dtype=int))
    B = np.setdiff1d(np.arange(len(mu)), A)
    zb = np.asarray(other_values, dtype=np.float64)
    laa = lam[np.ix_(A, A)]
    try:
        _chol_np(laa)
    except ValueError as exc:
        raise ValueError("conditional precision block is singular") from exc
    cov = np.linalg.inv(laa)
    shift = (zb - mu[B]) @ lam[np.ix_(A, B)].T
    mean = mu[A] - shift @ cov.T
    return mean, cov


def gaussian_log_density(g: GaussianUgm, z) -> Value:
    """Normalised log density (differentiable in ``mu``, ``Lam`` and ``z``)."""
    lam = ad.as_value(g.Lam)
    d = lam.shape[0]
    low = ad.cholesky(lam)
    diag = ad.slice_(low, (np.arange(d), np.arange(d)))
    logdet = 2.0 * ad.sum_(ad.log(diag))
    dz = ad.as_value(z) - g.mu
    quad = ad.sum_(ad.matmul(dz, lam) * dz, axis=-1)
    return 0.5 * logdet - 0.5 * d * np.log(2 * np.pi) - 0.5 * quad


def gaussian_log_density_np(g: GaussianUgm, z: np.ndarray) -> np.ndarray:
    mu, lam = _np(g.mu), _np(g.Lam)
    low = _chol_np(lam)
    dz = np.asarray(z) - mu
    quad = np.einsum("...i,ij,...j->...", dz, lam, dz)
    return np.log(np.diag(low)).sum() - 0.5 * len(mu) * np.log(2 * np.pi) - 0.5 * quad


def sample_gaussian(g: GaussianUgm, n: int, rng) -> np.ndarray:
    """Exact samples ``mu + L^{-T} eps`` where ``Lam = L L^T``."""
    mu, lam = _np(g.mu), _np(g.Lam)
    low = _chol_np(lam)
    eps = rng.standard_normal((n, len(mu)))
    return mu + np.linalg.solve(low.T, eps.T).T


def kl_gaussian(q: GaussianUgm, p: GaussianUgm) -> float:
    """Closed-form ``KL[q || p]`` for precision-parameterised Gaussians."""
    mq, lq = _np(q.mu), _np(q.Lam)
    mp, lp = _np(p.mu), _np(p.Lam)
    cq, cp = _chol_np(lq), _chol_np(lp)
    cov_q = np.linalg.inv(lq)
    d = mq - mp
    logdet_q = 2 * np.log(np.diag(cq)).sum()
    logdet_p = 2 * np.log(np.diag(cp)).sum()
    return 0.5 * (np.trace(lp @ cov_q) + d @ lp @ d - len(mq) + logdet_q - logdet_p)


# ---------------------------------------------------------------------------
# Bernoulli mixture
# ---------------------------------------------------------------------------

def mixture_log_prob(m: BernoulliMixture, z) -> Value:
    """``log sum_i alpha_i exp(sum_a nu_ia z_a - softplus(nu_ia))``.

    ``z`` may be relaxed (continuous); batch dims lead.
    """
    if np.shape(_np(z))[-1] != m.n:
        raise ValueError(f"state length {np.shape(_np(z))[-1]} != mixture size {m.n}")
    z = ad.as_value(z)
    const = np.log(m.weights) - np.logaddexp(0.0, m.logits).sum(-1)
    flat = ad.reshape(z, (-1, m.n)) if z.ndim != 2 else z
    comp = ad.matmul(flat, m.logits.T) + const
    out = ad.logsumexp(comp, axis=-1)
    return ad.reshape(out, z.shape[:-1]) if z.ndim != 2 else out


def mixture_log_prob_np(m: BernoulliMixture, z: np.ndarray) -> np.ndarray:
    const = np.log(m.weights) - np.logaddexp(0.0, m.logits).sum(-1)
    return special.logsumexp(np.asarray(z) @ m.logits.T + const, axis=-1)


def make_bit_mixture(n: int, n_components: int, rng, variance: float = 0.09) -> BernoulliMixture:
    """Equal-weight mixture whose components put mean ``p`` or ``1-p`` on each bit.

    ``p`` solves ``p (1 - p) = variance`` with ``p > 1/2`` (0.9 for 0.09); the
    high/low pattern of each component is drawn from ``rng``.
    """
    hi = 0.5 + np.sqrt(0.25 - variance)
    pattern = rng.integers(0, 2, size=(n_components, n))
    means = np.where(pattern == 1, hi, 1.0 - hi)
    logits = np.log(means) - np.log1p(-means)
    return BernoulliMixture(np.full(n_components, 1.0 / n_components), logits)


def kl_rbm_to_target(p: RbmParams, target_log_prob: np.ndarray) -> float:
    """Exact ``KL[q_rbm || target]`` over all joint states."""
    if p.n1 + p.n2 > ENUM_CAP:
        raise EnumerationError("RBM too large for exact KL")
    logq = rbm_log_prob_table(p)
    q = np.exp(logq)
    return float(np.sum(q * (logq - target_log_prob)))


def kl_rbm_to_target_estimate(p: RbmParams, z1: np.ndarray, z2: np.ndarray,
                              target_log_prob_fn) -> tuple[float, float]:
    """Sample estimate of the KL and its standard error, using exact log Z."""
    log_q = -rbm_energy_np(p, z1, z2) - rbm_exact_logz(p)
    vals = log_q - target_log_prob_fn(np.concatenate([z1, z2], axis=-1))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def sample_exact(p: RbmParams, n: int, rng) -> BinaryState:
    """Draw ``n`` exact samples from an enumerable RBM."""
    probs = rbm_exact_distribution(p)
    idx = rng.choice(len(probs), size=n, p=probs)
    z1, z2 = joint_states(p.n1, p.n2)
    return BinaryState(z1[idx].copy(), z2[idx].copy())
