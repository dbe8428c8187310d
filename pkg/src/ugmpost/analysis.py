"""Mean-field mode analysis and log-partition difficulty studies."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import special

from .gibbs import AnnealPath, ais_logz, sample_prior
from .ugm import ENUM_CAP, BinaryState, RbmParams, rbm_exact_logz, sample_exact


@dataclass
class MeanFieldState:
    """Factorial Bernoulli means of both layers (optionally batched).

    ``converged`` and ``iters`` describe the descent that produced the state.
    """

    m1: np.ndarray
    m2: np.ndarray
    converged: object = True
    iters: int = 0

    def __post_init__(self):
        self.m1 = np.asarray(self.m1, dtype=np.float64)
        self.m2 = np.asarray(self.m2, dtype=np.float64)
        if np.any((self.m1 < 0) | (self.m1 > 1)) or np.any((self.m2 < 0) | (self.m2 > 1)):
            raise ValueError("mean-field probabilities must lie in [0, 1]")

    def concat(self) -> np.ndarray:
        return np.concatenate([self.m1, self.m2], axis=-1)


def _updates(p: RbmParams, m1, m2):
    new1 = special.expit(-(p.b1 + m2 @ p.W.T))
    new2 = special.expit(-(p.b2 + new1 @ p.W))
    return new1, new2


def fixed_point_residual(p: RbmParams, m: MeanFieldState) -> np.ndarray:
    """Max violation of both mean-field equations (per batch entry)."""
    p = p.numpy()
    r1 = np.abs(m.m1 - special.expit(-(p.b1 + m.m2 @ p.W.T))).max(-1)
    r2 = np.abs(m.m2 - special.expit(-(p.b2 + m.m1 @ p.W))).max(-1)
    return np.maximum(r1, r2)


def mean_field_descend(p: RbmParams, init, max_iters: int = 10_000, tol: float = 1e-10,
                       damping: float = 0.0) -> MeanFieldState:
    """Block coordinate descent of ``KL(mean-field || RBM)`` to a fixed point.

    Iterates ``m1 <- sigmoid(-(b1 + W m2))``, ``m2 <- sigmoid(-(b2 + W^T m1))``
    until the largest change is below ``tol``.  ``damping`` mixes in the old
    means.  ``init`` may be a (batched) BinaryState or MeanFieldState; batch
    entries stop updating once converged.  Non-convergence is reported in the
    ``converged`` field rather than raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    p = p.numpy()
    m1 = np.array(init.m1 if isinstance(init, MeanFieldState) else init.z1, dtype=np.float64)
    m2 = np.array(init.m2 if isinstance(init, MeanFieldState) else init.z2, dtype=np.float64)
    active = np.ones(m1.shape[:-1], dtype=bool)
    it = 0
    for it in range(1, max_iters + 1):
        new1, new2 = _updates(p, m1, m2)
        if damping:
            new1 = damping * m1 + (1 - damping) * new1
            new2 = damping * m2 + (1 - damping) * new2
        delta = np.maximum(np.abs(new1 - m1).max(-1), np.abs(new2 - m2).max(-1))
        m1 = np.where(active[..., None], new1, m1)
        m2 = np.where(active[..., None], new2, m2)
        active = active & (delta >= tol)
        if not active.any():
            break
    converged = ~active
    return MeanFieldState(m1, m2, converged if converged.ndim else bool(converged), it)


def bernoulli_entropy(m: np.ndarray) -> np.ndarray:
    return -(special.xlogy(m, m) + special.xlogy(1 - m, 1 - m)).sum(-1)


def kl_mean_field_to_rbm(p: RbmParams, m: MeanFieldState, logz: float | None = None) -> np.ndarray:
    """``KL(m || q) = -H(m) + E_m[E] + log Z`` in closed form.

    The expected energy factorises under ``m``; ``log Z`` is exact unless
    supplied.
    """
    p = p.numpy()
    logz = rbm_exact_logz(p) if logz is None else logz
    energy = m.m1 @ p.b1 + m.m2 @ p.b2 + np.einsum("...i,ij,...j->...", m.m1, p.W, m.m2)
    return energy - bernoulli_entropy(m.m1) - bernoulli_entropy(m.m2) + logz


@dataclass
class Mode:
    mean: np.ndarray
    basin: int
    kl: float
    residual: float

    def to_dict(self) -> dict:
        return {"mode": self.mean.tolist(), "basin": self.basin, "kl": self.kl,
                "residual": self.residual}


def _default_sampler(p: RbmParams):
    if p.n1 + p.n2 <= ENUM_CAP:
        return lambda n, rng: sample_exact(p, n, rng)
    return lambda n, rng: sample_prior(p, AnnealPath(256, max(n, 2)), n, rng)


def count_modes(p: RbmParams, n_init: int = 100, dedupe_radius: float = 1e-3, sampler=None,
                rng=None, tol: float = 1e-10, max_iters: int = 10_000,
                logz: float | None = None) -> list[Mode]:
    """Distinct mean-field fixed points reached from sampled starting states.

    Each sample seeds a descent; fixed points closer than ``dedupe_radius``
    (L-infinity) are merged.  Modes are returned sorted by basin size, then
    lexicographically, so the result does not depend on sample order.
    """
    p = p.numpy()
    rng = np.random.default_rng(0) if rng is None else rng
    sampler = _default_sampler(p) if sampler is None else sampler
    init = sampler(n_init, rng)
    fp = mean_field_descend(p, BinaryState(init.z1, init.z2), max_iters, tol)
    points = fp.concat()
    # order-independent clustering: visit points in lexicographic order
    order = np.lexsort(points.T[::-1])
    centers, counts = [], []
    for i in order:
        for c, centre in enumerate(centers):
            if np.abs(points[i] - centre).max() < dedupe_radius:
                counts[c] += 1
                break
        else:
            centers.append(points[i])
            counts.append(1)
    if logz is None:
        logz = (float(rbm_exact_logz(p)) if min(p.n1, p.n2) <= ENUM_CAP
                else float(ais_logz(p, AnnealPath(4096), rng).mean))
    modes = []
    for centre, count in zip(centers, counts):
        st = MeanFieldState(centre[:p.n1], centre[p.n1:])
        modes.append(Mode(centre, count, float(kl_mean_field_to_rbm(p, st, logz)),
                          float(fixed_point_residual(p, st))))
    modes.sort(key=lambda m: (-m.basin, tuple(np.round(m.mean, 6))))
    return modes


def modes_to_json(modes: list[Mode], path=None) -> str:
    text = json.dumps([m.to_dict() for m in modes], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def bimodal_rbm(n1: int = 3, n2: int = 3, strength: float = 1.0) -> RbmParams:
    """Inter-layer ferromagnet in spin form: modes at all-off and all-on.

    ``E = -strength * sum_ij s1_i s2_j`` with ``s = 2 z - 1``, rewritten in
    the 0/1 parameterisation.
    """
    W = -4.0 * strength * np.ones((n1, n2))
    return RbmParams(np.full(n1, 2.0 * strength * n2), np.full(n2, 2.0 * strength * n1), W)


# ---------------------------------------------------------------------------
# log-partition difficulty
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    num_temps: int
    mean_abs_dev: float
    std: float


def logz_sweep_study(p: RbmParams, temp_counts, repeats: int, population: int, rng,
                     reference: float | None = None) -> list[SweepRow]:
    """Annealed log Z at each temperature count, ``repeats`` times each.

    Reports the mean absolute deviation of the individual estimates from the
    reference (exact by default) and their standard deviation.
    """
    p = p.numpy()
    ref = float(rbm_exact_logz(p)) if reference is None else reference
    rows = []
    for n in temp_counts:
        est = ais_logz(p, AnnealPath(int(n), population), rng, repeats=repeats).repeats
        rows.append(SweepRow(int(n), float(np.mean(np.abs(est - ref))),
                             float(np.std(est, ddof=1)) if repeats > 1 else 0.0))
    return rows


def temps_needed(rows: list[SweepRow], target_std: float = 1e-2) -> int | None:
    """Smallest temperature count from which the std stays at or below target."""
    ok = [r.std <= target_std for r in rows]
    for i, r in enumerate(rows):
        if all(ok[i:]):
            return r.num_temps
    return None


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["num_temps", "mean_abs_dev", "std"])
        for r in rows:
            w.writerow([r.num_temps, repr(r.mean_abs_dev), repr(r.std)])
