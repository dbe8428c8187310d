"""Block Gibbs sampling for bipartite binary UGMs.

Contents: forward and reverse sweeps, their exact kernel tables and the
balance identity between them, persistent per-datapoint chains, and
population annealing (AIS with resampling) for sampling and log-partition
estimation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .ugm import (ENUM_CAP, BinaryState, EnumerationError, RbmParams, cond_logits_np,
                  enumerate_states, rbm_exact_distribution)


def bernoulli_from_uniform(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``1[u > 1 - sigmoid(logits)]``; the threshold rule the relaxations share."""
    return (u > special.expit(-logits)).astype(np.float64)


def gibbs_sweep(p: RbmParams, s: BinaryState, rng=None, uniforms=None) -> BinaryState:
    """One forward sweep: ``z1 ~ q(z1 | z2')`` then ``z2 ~ q(z2 | z1)``.

    ``uniforms`` (a pair of arrays) replaces ``rng`` to drive the draws with
    fixed noise, so a relaxed sweep can share the exact same thresholds.
    """
    p = p.numpy()
    if uniforms is None:
        u1 = rng.random(np.broadcast_shapes(s.z1.shape, p.b1.shape))
        u2 = rng.random(np.broadcast_shapes(s.z2.shape, p.b2.shape))
    else:
        u1, u2 = uniforms
    z1 = bernoulli_from_uniform(cond_logits_np(p, 1, s.z2), u1)
    z2 = bernoulli_from_uniform(cond_logits_np(p, 2, z1), u2)
    return BinaryState(z1, z2)


def reverse_sweep(p: RbmParams, s: BinaryState, rng=None, uniforms=None) -> BinaryState:
    """Reverse-order sweep: ``z2' ~ q(z2' | z1)`` then ``z1' ~ q(z1' | z2')``."""
    p = p.numpy()
    if uniforms is None:
        u2 = rng.random(np.broadcast_shapes(s.z2.shape, p.b2.shape))
        u1 = rng.random(np.broadcast_shapes(s.z1.shape, p.b1.shape))
    else:
        u1, u2 = uniforms
    z2 = bernoulli_from_uniform(cond_logits_np(p, 2, s.z1), u2)
    z1 = bernoulli_from_uniform(cond_logits_np(p, 1, z2), u1)
    return BinaryState(z1, z2)


def run_sweeps(p: RbmParams, s: BinaryState, n: int, rng) -> BinaryState:
    for _ in range(n):
        s = gibbs_sweep(p, s, rng)
    return s


# ---------------------------------------------------------------------------
# exact kernels
# ---------------------------------------------------------------------------

def _conditional_tables(p: RbmParams):
    """``P1[z2, z1] = q(z1|z2)``, ``P2[z1, z2] = q(z2|z1)`` and joint ``Q[z1, z2]``."""
    p = p.numpy()
    S1, S2 = enumerate_states(p.n1), enumerate_states(p.n2)

    def table(logits, S):
        # logits: (cond_states, n); result[c, s] = prod_i Bernoulli(S[s, i]; logits[c, i])
        logp1 = -np.logaddexp(0.0, -logits)
        logp0 = -np.logaddexp(0.0, logits)
        return np.exp(logp1 @ S.T + logp0 @ (1.0 - S).T)

    P1 = table(cond_logits_np(p, 1, S2), S1)
    P2 = table(cond_logits_np(p, 2, S1), S2)
    Q = rbm_exact_distribution(p).reshape(len(S1), len(S2))
    return P1, P2, Q


def gibbs_kernel_matrix(p: RbmParams) -> np.ndarray:
    """``K[z', z] = q(z2|z1) q(z1|z2')`` over joint-state codes."""
    P1, P2, _ = _conditional_tables(p)
    n1s, n2s = P2.shape
    K = P1[None, :, :, None] * P2[None, None, :, :]
    K = np.broadcast_to(K, (n1s, n2s, n1s, n2s))
    return K.reshape(n1s * n2s, n1s * n2s)


def reverse_kernel_matrix(p: RbmParams) -> np.ndarray:
    """``R[z, z'] = q(z1'|z2') q(z2'|z1)``: from ``z`` to ``z'``."""
    P1, P2, _ = _conditional_tables(p)
    n1s, n2s = P2.shape
    # axes (z1, z2, z1', z2')
    R = P1.T[None, None, :, :] * P2[:, None, None, :]
    R = np.broadcast_to(R, (n1s, n2s, n1s, n2s))
    return R.reshape(n1s * n2s, n1s * n2s)


def verify_balance(p: RbmParams) -> float:
    """Max ``|q(z') K_Gibbs(z|z') - q(z) K_Reverse(z'|z)|`` over all state pairs."""
    if p.n1 + p.n2 > 12:
        raise EnumerationError("balance check limited to 12 units")
    P1, P2, Q = _conditional_tables(p)
    worst = 0.0
    # axes (z2', z1, z2) for one fixed z1'
    for a in range(Q.shape[0]):
        fwd = Q[a][:, None, None] * P1[:, :, None] * P2[None, :, :]
        rev = Q[None, :, :] * P1[:, a][:, None, None] * P2.T[:, :, None]
        worst = max(worst, float(np.abs(fwd - rev).max()))
    return worst


def fixed_point_violation(p: RbmParams) -> float:
    """Max ``|sum_z' q(z') K(z|z') - q(z)|`` for the forward Gibbs kernel."""
    if p.n1 + p.n2 > ENUM_CAP:
        raise EnumerationError("fixed-point check needs an enumerable RBM")
    P1, P2, Q = _conditional_tables(p)
    marg2 = Q.sum(axis=0)
    pushed = (marg2 @ P1)[:, None] * P2
    return float(np.abs(pushed - Q).max())


# ---------------------------------------------------------------------------
# persistent chains
# ---------------------------------------------------------------------------

_MAGIC = b"UGMC"


@dataclass
class ChainStore:
    """Persistent Gibbs states keyed by datapoint index.

    Each chain owns a counter-based random stream keyed by ``(seed, index)``,
    so results do not depend on the order in which chains are advanced.
    """

    n1: int
    n2: int
    seed: int = 0
    states: dict = field(default_factory=dict)
    _rngs: dict = field(default_factory=dict, repr=False)

    def rng(self, index: int) -> np.random.Generator:
        gen = self._rngs.get(index)
        if gen is None:
            gen = np.random.Generator(np.random.Philox(key=[self.seed, int(index)]))
            self._rngs[index] = gen
        return gen

    def get(self, indices) -> BinaryState:
        """Stacked states; unseen indices start from uniform random bits."""
        z1 = np.empty((len(indices), self.n1))
        z2 = np.empty((len(indices), self.n2))
        for row, i in enumerate(indices):
            i = int(i)
            if i not in self.states:
                bits = (self.rng(i).random(self.n1 + self.n2) < 0.5).astype(np.float64)
                self.states[i] = BinaryState(bits[:self.n1], bits[self.n1:])
            z1[row], z2[row] = self.states[i].z1, self.states[i].z2
        return BinaryState(z1, z2)

    def put(self, indices, s: BinaryState) -> None:
        if s.z1.shape[-1] != self.n1 or s.z2.shape[-1] != self.n2:
            raise ValueError("state shape does not match the store")
        for row, i in enumerate(indices):
            self.states[int(i)] = BinaryState(np.array(s.z1[row]), np.array(s.z2[row]))

    def uniforms(self, indices, sweeps: int) -> np.ndarray:
        """Per-chain noise of shape ``(batch, sweeps, n1 + n2)``."""
        n = self.n1 + self.n2
        return np.stack([self.rng(int(i)).random((sweeps, n)) for i in indices])

    def save(self, path) -> None:
        """Header ``magic, n1, n2, count``; then ``index`` + packed bits per chain."""
        keys = sorted(self.states)
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<III", self.n1, self.n2, len(keys)))
            for k in keys:
                bits = self.states[k].concat().astype(np.uint8)
                fh.write(struct.pack("<Q", k))
                fh.write(np.packbits(bits, bitorder="little").tobytes())

    @classmethod
    def load(cls, path, seed: int = 0) -> "ChainStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != _MAGIC:
            raise ValueError("not a chain-store file")
        n1, n2, count = struct.unpack_from("<III", blob, 4)
        width = (n1 + n2 + 7) // 8
        store = cls(n1, n2, seed)
        off = 16
        for _ in range(count):
            if off + 8 + width > len(blob):
                raise ValueError("truncated chain-store file")
            (k,) = struct.unpack_from("<Q", blob, off)
            raw = np.frombuffer(blob, np.uint8, width, off + 8)
            bits = np.unpackbits(raw, bitorder="little")[:n1 + n2].astype(np.float64)
            store.states[int(k)] = BinaryState(bits[:n1], bits[n1:])
            off += 8 + width
        return store


def update_persistent(store: ChainStore, indices, p: RbmParams, sweeps: int) -> BinaryState:
    """Advance each indexed chain ``sweeps`` forward sweeps in place.

    ``p`` carries one RBM per index along its leading axis (or a single RBM
    shared by all chains).  Returns the updated states.
    """
    p = p.numpy()
    s = store.get(indices)
    if p.batch_shape not in ((), (len(indices),)):
        raise ValueError(f"parameter batch {p.batch_shape} does not match {len(indices)} chains")
    if sweeps > 0:
        u = store.uniforms(indices, sweeps)
        for k in range(sweeps):
            s = gibbs_sweep(p, s, uniforms=(u[:, k, :store.n1], u[:, k, store.n1:]))
        store.put(indices, s)
    return s


# ---------------------------------------------------------------------------
# population annealing
# ---------------------------------------------------------------------------

@dataclass
class AnnealPath:
    """Interpolation ``beta * z1^T W z2`` from the bias-only model to the RBM."""

    num_temps: int
    population_size: int = 256
    resample_threshold: float = 0.5
    betas: np.ndarray | None = None

    def __post_init__(self):
        if self.betas is None:
            if self.num_temps < 2:
                raise ValueError("need at least two temperatures")
            self.betas = np.linspace(0.0, 1.0, self.num_temps)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.num_temps = len(self.betas)
        if self.betas[0] != 0.0 or self.betas[-1] != 1.0 or np.any(np.diff(self.betas) < 0):
            raise ValueError("betas must rise monotonically from 0 to 1")
        if self.population_size < 2:
            raise ValueError("population must hold at least two chains")


@dataclass
class LogZEstimate:
    mean: float
    std: float
    num_temps: int
    population_size: int
    repeats: np.ndarray | None = None


def effective_sample_size(logw: np.ndarray) -> np.ndarray:
    """``1 / sum(w_norm^2)`` along the last axis."""
    w = np.exp(logw - special.logsumexp(logw, axis=-1, keepdims=True))
    return 1.0 / np.sum(w * w, axis=-1)


def multinomial_resample(logw: np.ndarray, rng) -> np.ndarray:
    """Ancestor indices drawn with probabilities proportional to ``exp(logw)``."""
    w = np.exp(logw - special.logsumexp(logw))
    cw = np.cumsum(w)
    cw[-1] = 1.0
    return np.searchsorted(cw, rng.random(len(w)), side="right")


def _bias_logz(p: RbmParams) -> np.ndarray:
    return np.logaddexp(0.0, -p.b1).sum(-1) + np.logaddexp(0.0, -p.b2).sum(-1)


def _anneal(p: RbmParams, path: AnnealPath, population: int, rng):
    """Run population annealing on layer 1 with layer 2 summed out.

    The unnormalised marginal at inverse coupling ``beta`` is
    ``-b1.z1 + sum_j softplus(-(b2 + beta W^T z1)_j)``.  ``p`` may be batched;
    the population axis is inserted just before the unit axis.

    Returns ``(log_z, z1, logw)``.
    """
    b1 = p.b1[..., None, :]
    b2 = p.b2[..., None, :]
    W = p.W[..., None, :, :]
    batch = p.batch_shape
    z1 = (rng.random(batch + (population, p.n1)) < special.expit(-b1)).astype(np.float64)
    logw = np.zeros(batch + (population,))
    log_z = _bias_logz(p)
    betas = path.betas

    def log_f(z1, h, beta):
        return -(b1 * z1).sum(-1) + np.logaddexp(0.0, -(b2 + beta * h)).sum(-1)

    for k in range(1, len(betas)):
        h = np.einsum("...pi,...pij->...pj", z1, np.broadcast_to(W, batch + (1, p.n1, p.n2)))
        logw = logw + log_f(z1, h, betas[k]) - log_f(z1, h, betas[k - 1])
        if k == len(betas) - 1:
            break
        ess = effective_sample_size(logw)
        low = ess < path.resample_threshold * population
        if np.any(low):
            flat_w = logw.reshape(-1, population)
            flat_z = z1.reshape(-1, population, p.n1)
            flat_lz = np.array(log_z, dtype=np.float64).reshape(-1) * np.ones(len(flat_w))
            for r in np.flatnonzero(low.reshape(-1)):
                if not np.isfinite(flat_w[r]).any():
                    raise FloatingPointError("degenerate annealing weights")
                flat_lz[r] += special.logsumexp(flat_w[r]) - np.log(population)
                flat_z[r] = flat_z[r][multinomial_resample(flat_w[r], rng)]
                flat_w[r] = 0.0
            logw = flat_w.reshape(logw.shape)
            z1 = flat_z.reshape(z1.shape)
            log_z = flat_lz.reshape(batch) if batch else flat_lz[0]
        beta = betas[k]
        u2 = rng.random(batch + (population, p.n2))
        z2 = (u2 < special.expit(-(b2 + beta * h))).astype(np.float64)
        field1 = np.einsum("...pij,...pj->...pi",
                           np.broadcast_to(W, batch + (1, p.n1, p.n2)), z2)
        u1 = rng.random(batch + (population, p.n1))
        z1 = (u1 < special.expit(-(b1 + beta * field1))).astype(np.float64)
    if not np.all(np.isfinite(logw).any(axis=-1)):
        raise FloatingPointError("degenerate annealing weights")
    log_z = log_z + special.logsumexp(logw, axis=-1) - np.log(population)
    return log_z, z1, logw


def ais_logz(p: RbmParams, path: AnnealPath, rng, repeats: int = 1) -> LogZEstimate:
    """Annealed estimate of ``log Z`` with its spread over independent repeats.

    The reported mean averages the repeats in probability space
    (``logsumexp - log repeats``); ``std`` is the sample std of the repeats.
    Batched parameters yield arrays.
    """
    p = p.numpy()
    stacked = RbmParams(np.broadcast_to(p.b1, (repeats,) + p.b1.shape),
                        np.broadcast_to(p.b2, (repeats,) + p.b2.shape),
                        np.broadcast_to(p.W, (repeats,) + p.W.shape))
    est, _, _ = _anneal(stacked, path, path.population_size, rng)
    est = np.asarray(est)
    mean = special.logsumexp(est, axis=0) - np.log(repeats)
    std = est.std(axis=0, ddof=1) if repeats > 1 else np.zeros_like(mean)
    return LogZEstimate(mean, std, path.num_temps, path.population_size, est)


def sample_prior(p: RbmParams, path: AnnealPath, n: int, rng, return_logz: bool = False):
    """``n`` approximate samples from the RBM via annealing with a final resample.

    With ``return_logz`` the run's own log-partition estimate is returned too.
    """
    p = p.numpy()
    if p.batch_shape:
        raise ValueError("sample_prior expects a single RBM")
    log_z, z1, logw = _anneal(p, path, n, rng)
    if np.ptp(logw) > 0:
        z1 = z1[multinomial_resample(logw, rng)]
    u2 = rng.random((n, p.n2))
    z2 = (u2 < special.expit(-(p.b2 + z1 @ p.W))).astype(np.float64)
    if return_logz:
        return BinaryState(z1, z2), float(log_z)
    return BinaryState(z1, z2)
