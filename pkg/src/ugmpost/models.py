"""Networks, generative model and variational objectives.

Encoders produce either per-example RBM parameters (undirected posterior) or
the logits of a hierarchy of factorial groups with a shared context feature
(directed posterior).  The generative model pairs an RBM prior with a
Bernoulli decoder.  Objectives return scalar Values to be *maximised*.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Value
from .gibbs import AnnealPath, ChainStore, ais_logz, sample_prior, update_persistent
from .relax import EPS_CLIP, RelaxationConfig, draw_sweep_noise, relax_bernoulli, relaxed_gibbs_chain
from .ugm import (ENUM_CAP, BinaryState, EnumerationError, GaussianUgm, RbmParams,
                  enumerate_states, gaussian_log_density, joint_states, rbm_energy,
                  rbm_energy_np, rbm_exact_logz)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

@dataclass
class MlpSpec:
    """Layer widths from input to output; tanh between layers.

    ``final_activation`` also applies tanh to the output (used for trunks).
    ``batch_norm`` normalises hidden pre-activations with batch statistics.
    """

    widths: tuple
    activation: str = "tanh"
    batch_norm: bool = False
    final_activation: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")


class Mlp:
    """Dense network whose parameters are leaf Values in ``self.params``."""

    def __init__(self, spec: MlpSpec, rng, name: str = "mlp", out_scale: float = 1.0):
        self.spec = spec
        self.name = name
        self.params: dict[str, Value] = {}
        n_layers = len(spec.widths) - 1
        for k, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            scale = 1.0 / np.sqrt(a)
            if k == n_layers - 1:
                scale *= out_scale
            self.params[f"{name}.W{k}"] = Value(rng.normal(0.0, scale, (a, b)), True)
            self.params[f"{name}.b{k}"] = Value(np.zeros(b), True)
            if spec.batch_norm and (k < n_layers - 1 or spec.final_activation):
                self.params[f"{name}.gamma{k}"] = Value(np.ones(b), True)
                self.params[f"{name}.beta{k}"] = Value(np.zeros(b), True)

    def __call__(self, x, frozen: bool = False) -> Value:
        """Apply the network to ``x`` of shape ``(..., widths[0])``.

        ``frozen`` evaluates with stop-gradient weights (gradients still reach
        ``x``).
        """
        p = self.params
        get = (lambda k: ad.stop_gradient(p[k])) if frozen else (lambda k: p[k])
        h = ad.as_value(x)
        lead = h.shape[:-1]
        if h.ndim != 2:
            h = ad.reshape(h, (-1, h.shape[-1]))
        n_layers = len(self.spec.widths) - 1
        for k in range(n_layers):
            h = ad.matmul(h, get(f"{self.name}.W{k}")) + get(f"{self.name}.b{k}")
            if k < n_layers - 1 or self.spec.final_activation:
                if self.spec.batch_norm:
                    mu = ad.mean(h, axis=0, keepdims=True)
                    var = ad.mean(ad.square(h - mu), axis=0, keepdims=True)
                    h = (h - mu) / ad.sqrt(var + 1e-5)
                    h = h * get(f"{self.name}.gamma{k}") + get(f"{self.name}.beta{k}")
                h = ad.tanh(h)
        return ad.reshape(h, lead + (h.shape[-1],)) if len(lead) != 1 else h


def bernoulli_log_lik(x, logits) -> Value:
    """``sum_d x_d l_d - softplus(l_d)`` over the last axis."""
    logits = ad.as_value(logits)
    return ad.sum_(ad.as_value(x) * logits - ad.softplus(logits), axis=-1)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class UndirectedEncoder:
    """``x -> (b1(x), b2(x), W(x))`` through a tanh trunk and linear heads.

    With ``freeze_w`` the coupling head is dropped and ``W(x) = 0``, which
    gives a factorial (mean-field) posterior.
    """

    def __init__(self, n_in: int, hidden: tuple, n1: int, n2: int, rng,
                 freeze_w: bool = False, batch_norm: bool = False, w_scale: float = 0.1):
        self.n1, self.n2 = n1, n2
        self.freeze_w = freeze_w
        self.trunk = Mlp(MlpSpec((n_in,) + tuple(hidden), batch_norm=batch_norm,
                                 final_activation=True), rng, "enc.trunk")
        h = hidden[-1]
        self.head1 = Mlp(MlpSpec((h, n1)), rng, "enc.b1")
        self.head2 = Mlp(MlpSpec((h, n2)), rng, "enc.b2")
        self.headw = None if freeze_w else Mlp(MlpSpec((h, n1 * n2)), rng, "enc.W", w_scale)

    @property
    def params(self) -> dict:
        out = {**self.trunk.params, **self.head1.params, **self.head2.params}
        if self.headw is not None:
            out.update(self.headw.params)
        return out


def encode_undirected(enc: UndirectedEncoder, x) -> RbmParams:
    """Per-example posterior RBM parameters, batched along the first axis."""
    h = enc.trunk(x)
    b1 = enc.head1(h)
    b2 = enc.head2(h)
    if enc.headw is None:
        W = Value(np.zeros(b1.shape[:-1] + (enc.n1, enc.n2)))
    else:
        W = ad.reshape(enc.headw(h), b1.shape[:-1] + (enc.n1, enc.n2))
    return RbmParams(b1, b2, W)


class DirectedEncoder:
    """Hierarchy ``q(z|x) = prod_i q(z_i | c(x), z_<i)`` of factorial groups.

    ``c(x)`` comes from two tanh layers shared by every group; group ``i`` has
    a linear head on ``[c(x), z_<i]``.
    """

    def __init__(self, n_in: int, n_latent: int, n_groups: int, rng,
                 context: int = 200, batch_norm: bool = False):
        if not 1 <= n_groups <= n_latent:
            raise ValueError("need 1 <= groups <= latent size")
        self.n_latent = n_latent
        bounds = np.linspace(0, n_latent, n_groups + 1).round().astype(int)
        self.groups = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        self.context = Mlp(MlpSpec((n_in, context, context), batch_norm=batch_norm,
                                   final_activation=True), rng, "enc.ctx")
        self.heads = [Mlp(MlpSpec((context + a, b - a)), rng, f"enc.g{i}")
                      for i, (a, b) in enumerate(self.groups)]

    @property
    def params(self) -> dict:
        out = dict(self.context.params)
        for h in self.heads:
            out.update(h.params)
        return out

    def group_logits(self, ctx: Value, prefix, i: int, frozen: bool = False) -> Value:
        a, _ = self.groups[i]
        inp = ctx if a == 0 else ad.concat([ctx, ad.as_value(prefix)[..., :a]], axis=-1)
        return self.heads[i](inp, frozen=frozen)


def _broadcast_lead(v: Value, lead: tuple) -> Value:
    if v.shape[:-1] == lead:
        return v
    return ad.broadcast(v, lead + v.shape[-1:])


def encode_directed(enc: DirectedEncoder, x, rng, relaxation: RelaxationConfig | None,
                    n_samples: int | None = None, noise=None, frozen: bool = False):
    """Ancestral sampling through the groups.

    Returns ``(zeta, log_q)``.  With ``relaxation=None`` the draws are binary
    (threshold rule on the same uniforms); otherwise they are relaxed.
    ``log_q`` is the factorial Bernoulli log-probability of the sample with
    every group's logits evaluated at the sampled prefix.  ``n_samples`` adds
    a leading sample axis.
    """
    ctx = enc.context(x, frozen=frozen)
    lead = ctx.shape[:-1] if n_samples is None else (n_samples,) + ctx.shape[:-1]
    ctx = _broadcast_lead(ctx, lead)
    if noise is None:
        noise = rng.uniform(EPS_CLIP, 1.0 - EPS_CLIP, lead + (enc.n_latent,))
    parts, logq = [], 0.0
    for i, (a, b) in enumerate(enc.groups):
        prefix = ad.concat(parts, axis=-1) if parts else None
        logit = enc.group_logits(ctx, prefix, i, frozen=frozen)
        eps = noise[..., a:b]
        if relaxation is None:
            z = Value((eps > special.expit(-logit.data)).astype(np.float64))
        else:
            z = relax_bernoulli(relaxation, logit, eps)
        logq = logq + bernoulli_log_lik(z, logit)
        parts.append(z)
    return ad.concat(parts, axis=-1), logq


def directed_log_q(enc: DirectedEncoder, x, z, frozen: bool = False) -> Value:
    """``log q(z|x)`` of a given (possibly relaxed) sample."""
    z = ad.as_value(z)
    ctx = _broadcast_lead(enc.context(x, frozen=frozen), z.shape[:-1])
    logq = 0.0
    for i, (a, b) in enumerate(enc.groups):
        logit = enc.group_logits(ctx, z, i, frozen=frozen)
        logq = logq + bernoulli_log_lik(z[..., a:b], logit)
    return logq


# ---------------------------------------------------------------------------
# generative model
# ---------------------------------------------------------------------------

class GenerativeModel:
    """RBM prior ``p(z)`` and Bernoulli decoder ``p(x|z)``.

    ``logz`` caches the current estimate of the prior's log partition function.
    """

    def __init__(self, n1: int, n2: int, n_out: int, hidden: tuple, rng,
                 batch_norm: bool = False):
        self.prior = RbmParams(Value(np.zeros(n1), True), Value(np.zeros(n2), True),
                               Value(rng.normal(0.0, 0.01, (n1, n2)), True))
        self.decoder = Mlp(MlpSpec((n1 + n2,) + tuple(hidden) + (n_out,),
                                   batch_norm=batch_norm), rng, "dec")
        self.logz = float(rbm_exact_logz(self.prior))

    @property
    def n1(self) -> int:
        return self.prior.n1

    @property
    def n2(self) -> int:
        return self.prior.n2

    @property
    def params(self) -> dict:
        return {"prior.b1": self.prior.b1, "prior.b2": self.prior.b2,
                "prior.W": self.prior.W, **self.decoder.params}

    def split(self, z):
        z = ad.as_value(z)
        return z[..., :self.n1], z[..., self.n1:]

    def log_lik(self, x, z, frozen: bool = False) -> Value:
        return bernoulli_log_lik(x, self.decoder(z, frozen=frozen))

    def prior_energy(self, z, frozen: bool = False) -> Value:
        prior = self.prior.stop_gradient() if frozen else self.prior
        z1, z2 = self.split(z)
        return rbm_energy(prior, z1, z2)


@dataclass
class AnnealSchedule:
    """Linear warm-up of ``lambda`` from ``start`` to 1 over ``span`` steps."""

    span: int = 0
    start: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.start <= 1.0:
            raise ValueError("start must lie in [0, 1]")

    def value(self, step: int) -> float:
        if self.span <= 0:
            return 1.0
        return float(min(1.0, self.start + (1.0 - self.start) * step / self.span))


# ---------------------------------------------------------------------------
# log-partition gradients
# ---------------------------------------------------------------------------

def logz_theta_grad(prior: RbmParams, samples: BinaryState) -> dict:
    """Negative-phase estimate of ``d log Z``: minus the sample moments."""
    z1, z2 = np.asarray(samples.z1), np.asarray(samples.z2)
    if z1.shape[0] == 0:
        raise ValueError("no prior samples")
    return {"b1": -z1.mean(0), "b2": -z2.mean(0),
            "W": -np.einsum("ni,nj->ij", z1, z2) / len(z1)}


def logz_node(prior: RbmParams, value: float, samples: BinaryState) -> Value:
    """Scalar ``log Z`` whose gradient is the negative-phase moment estimate."""
    g = logz_theta_grad(prior, samples)
    return ad.custom_scalar(value, [prior.b1, prior.b2, prior.W], [g["b1"], g["b2"], g["W"]])


def logz_node_amortized(phi: RbmParams, value, samples: BinaryState) -> Value:
    """Sum over examples of per-example ``log Z_phi(x)`` nodes.

    Each example's gradient comes from its own chain state(s); ``samples``
    is batched like ``phi`` (optionally with a leading sample axis).
    """
    z1, z2 = np.asarray(samples.z1), np.asarray(samples.z2)
    if z1.ndim == 3:
        g1, g2 = -z1.mean(0), -z2.mean(0)
        gW = -np.einsum("kbi,kbj->bij", z1, z2) / len(z1)
    else:
        g1, g2, gW = -z1, -z2, -np.einsum("bi,bj->bij", z1, z2)
    return ad.custom_scalar(float(np.sum(value)), [phi.b1, phi.b2, phi.W], [g1, g2, gW])


# ---------------------------------------------------------------------------
# ELBO surrogate (undirected posterior)
# ---------------------------------------------------------------------------

@dataclass
class SurrogateResult:
    objective: Value
    zeta: Value
    chain: BinaryState
    phi: RbmParams


def relaxed_posterior_sample(phi: RbmParams, chain_state: BinaryState, cfg, rng) -> Value:
    """``t`` relaxed sweeps from a stop-gradient chain state, as one vector."""
    batch = chain_state.z1.shape[:-1]
    noise = draw_sweep_noise(rng, batch, phi.n1, phi.n2, cfg.t)
    zeta1, zeta2 = relaxed_gibbs_chain(phi, chain_state.z2, cfg.relaxation, noise)
    return ad.concat([zeta1, zeta2], axis=-1)


def elbo_surrogate(x, model: GenerativeModel, enc: UndirectedEncoder, chain: BinaryState,
                   cfg, rng, logz_theta: Value | None = None, lam: float = 1.0,
                   phi: RbmParams | None = None) -> SurrogateResult:
    """Batch mean of ``-E_theta(zeta) - log Z_theta + log p(x|zeta) + E_sg(phi)(zeta)``.

    ``chain`` holds the (already equilibrated) discrete states, one per
    example.  ``lam`` scales the prior and posterior-energy terms (KL
    warm-up).  ``logz_theta`` defaults to a constant holding the cached
    estimate, i.e. no gradient for it.  A precomputed ``phi`` (the encoder
    output for ``x``) avoids a second forward pass.
    """
    if chain is None:
        raise ValueError("missing chain state")
    phi = encode_undirected(enc, x) if phi is None else phi
    zeta = relaxed_posterior_sample(phi, chain, cfg, rng)
    z1, z2 = model.split(zeta)
    e_prior = rbm_energy(model.prior, z1, z2)
    e_post = rbm_energy(phi.stop_gradient(), z1, z2)
    per_x = model.log_lik(x, zeta) + lam * (e_post - e_prior)
    lz = Value(model.logz) if logz_theta is None else logz_theta
    obj = ad.mean(per_x) - lam * lz
    return SurrogateResult(obj, zeta, chain, phi)


# ---------------------------------------------------------------------------
# importance-weighted objectives
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraw:
    """``K`` reparameterised samples per example and their log densities.

    ``log_q``: differentiable in the encoder parameters and in ``zeta``.
    ``log_q_sg``: encoder parameters stopped, still a function of ``zeta``.
    Both omit ``log_z`` (the posterior's log partition function, zero for
    normalised families), which is added back when a bound value is needed.
    """

    zeta: Value
    log_q: Value
    log_q_sg: Value
    log_z: np.ndarray | float = 0.0


class RbmPosterior:
    """Amortized RBM posterior sampled by persistent chains plus relaxed sweeps.

    Chain ``k`` of example ``i`` is keyed ``i * K + k`` in the store.
    """

    def __init__(self, enc: UndirectedEncoder, cfg, store: ChainStore, exact_logz: bool = True):
        self.enc, self.cfg, self.store = enc, cfg, store
        self.exact_logz = exact_logz

    @property
    def params(self) -> dict:
        return self.enc.params

    def draw(self, x, indices, K: int, rng) -> PosteriorDraw:
        phi = encode_undirected(self.enc, x)
        B = len(indices)
        keys = (np.asarray(indices)[None, :] * K + np.arange(K)[:, None]).reshape(-1)
        pn = phi.numpy()
        tiled = RbmParams(np.tile(pn.b1, (K, 1)), np.tile(pn.b2, (K, 1)), np.tile(pn.W, (K, 1, 1)))
        chains = update_persistent(self.store, keys, tiled, self.cfg.s)
        chains = BinaryState(chains.z1.reshape(K, B, -1), chains.z2.reshape(K, B, -1))
        zeta = relaxed_posterior_sample(phi, chains, self.cfg, rng)
        z1, z2 = zeta[..., :phi.n1], zeta[..., phi.n1:]
        log_q = -rbm_energy(phi, z1, z2)
        log_q_sg = -rbm_energy(phi.stop_gradient(), z1, z2)
        log_z = 0.0
        if self.exact_logz and phi.n1 <= ENUM_CAP:
            log_z = rbm_exact_logz(pn)
        return PosteriorDraw(zeta, log_q, log_q_sg, log_z)


class DirectedPosterior:
    """Hierarchical factorial posterior with relaxed ancestral samples."""

    def __init__(self, enc: DirectedEncoder, relaxation: RelaxationConfig):
        self.enc, self.relaxation = enc, relaxation

    @property
    def params(self) -> dict:
        return self.enc.params

    def draw(self, x, indices, K: int, rng) -> PosteriorDraw:
        zeta, log_q = encode_directed(self.enc, x, rng, self.relaxation, n_samples=K)
        log_q_sg = directed_log_q(self.enc, x, zeta, frozen=True)
        return PosteriorDraw(zeta, log_q, log_q_sg, 0.0)


class GaussianPosterior:
    """Fixed-structure Gaussian ``q`` with exact reparameterisation.

    Used to check importance-weighted gradients on a fully reparameterised
    family; ``q`` holds Values.
    """

    def __init__(self, q: GaussianUgm):
        self.q = q

    def draw(self, x, indices, K: int, rng, eps=None) -> PosteriorDraw:
        B = len(indices)
        d = self.q.dim
        eps = rng.standard_normal((K * B, d)) if eps is None else eps.reshape(K * B, d)
        low = ad.cholesky(self.q.Lam)
        z = ad.as_value(self.q.mu) + ad.transpose(ad.solve(ad.transpose(low), eps.T))
        z = ad.reshape(z, (K, B, d))
        frozen = GaussianUgm(ad.stop_gradient(self.q.mu), ad.stop_gradient(self.q.Lam))
        return PosteriorDraw(z, gaussian_log_density(self.q, z), gaussian_log_density(frozen, z), 0.0)


class GaussianLatentModel:
    """``p(z) = N(0, I)`` and ``p(x|z) = N(x; A z + c, sigma^2 I)``, all fixed."""

    def __init__(self, A: np.ndarray, c: np.ndarray, sigma: float = 1.0):
        self.A, self.c, self.sigma = np.asarray(A, float), np.asarray(c, float), float(sigma)
        self.logz = 0.0

    def log_lik(self, x, z, frozen: bool = False) -> Value:
        r = ad.as_value(x) - (ad.matmul(ad.as_value(z), self.A.T) + self.c)
        D = self.A.shape[0]
        return -0.5 * ad.sum_(r * r, axis=-1) / self.sigma ** 2 \
            - D * (np.log(self.sigma) + 0.5 * np.log(2 * np.pi))

    def log_prior(self, z) -> Value:
        z = ad.as_value(z)
        d = z.shape[-1]
        return -0.5 * ad.sum_(z * z, axis=-1) - 0.5 * d * np.log(2 * np.pi)

    def log_px(self, x) -> np.ndarray:
        """Exact ``log p(x)`` (marginal Gaussian)."""
        D = self.A.shape[0]
        cov = self.A @ self.A.T + self.sigma ** 2 * np.eye(D)
        r = np.asarray(x) - self.c
        _, logdet = np.linalg.slogdet(cov)
        return -0.5 * (np.einsum("...i,ij,...j->...", r, np.linalg.inv(cov), r)
                       + logdet + D * np.log(2 * np.pi))


def _log_prior(model, zeta, frozen: bool = False) -> Value:
    """Unnormalised log prior: ``-E_theta`` for RBM priors, exact otherwise."""
    if isinstance(model, GaussianLatentModel):
        return model.log_prior(zeta)
    return -model.prior_energy(zeta, frozen=frozen)


def log_weights(x, model, draw: PosteriorDraw, lam: float, logz_theta=0.0,
                sg_q: bool = False, frozen_model: bool = False) -> Value:
    """``lam (log p(z) - log q(z)) + log p(x|z)`` for every sample, shape ``(K, B)``."""
    log_q = draw.log_q_sg if sg_q else draw.log_q
    log_p = _log_prior(model, draw.zeta, frozen=frozen_model) - logz_theta
    return lam * (log_p - log_q + draw.log_z) + model.log_lik(x, draw.zeta, frozen=frozen_model)


def iw_objective(x, model, posterior, K: int, lam: float, rng, indices=None,
                 logz_theta=None, draw: PosteriorDraw | None = None) -> Value:
    """Annealed importance-weighted bound, averaged over the batch.

    ``w_i = p(z_i)^lam p(x|z_i) / q(z_i|x)^lam``; at ``lam = 1`` and ``K = 1``
    this is the single-sample ELBO integrand.
    """
    if K < 1 or not 0.0 <= lam <= 1.0:
        raise ValueError("need K >= 1 and lam in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    indices = np.arange(len(x)) if indices is None else indices
    draw = posterior.draw(x, indices, K, rng) if draw is None else draw
    lz = Value(model.logz) if logz_theta is None else logz_theta
    lw = log_weights(x, model, draw, lam, lz)
    if not np.isfinite(lw.data).any(axis=0).all():
        raise FloatingPointError("all importance weights vanish")
    return ad.mean(ad.logsumexp(lw, axis=0)) - np.log(K)


def dreg_surrogate(x, model, posterior, K: int, lam: float, rng, indices=None,
                   logz_theta=None, draw: PosteriorDraw | None = None) -> tuple[Value, Value]:
    """Surrogate whose gradient is the doubly reparameterised estimator.

    Encoder parameters receive ``sum_i (lam w_i^2 + (1 - lam) w_i) d log w_i / dz_i
    dz_i / dphi`` with normalised weights ``w_i``; model parameters receive the
    usual ``sum_i w_i d log w_i / dtheta``.  Returns ``(surrogate, bound)``.
    """
    x = np.asarray(x, dtype=np.float64)
    indices = np.arange(len(x)) if indices is None else indices
    draw = posterior.draw(x, indices, K, rng) if draw is None else draw
    lz = Value(model.logz) if logz_theta is None else logz_theta
    # path through zeta only: q and model frozen
    lw_path = log_weights(x, model, draw, lam, ad.stop_gradient(lz), sg_q=True, frozen_model=True)
    wn = np.exp(lw_path.data - special.logsumexp(lw_path.data, axis=0, keepdims=True))
    if not np.all(np.isfinite(wn)):
        raise FloatingPointError("degenerate importance weights")
    coef = lam * wn ** 2 + (1.0 - lam) * wn
    # model parameters with the sample held fixed
    fixed = PosteriorDraw(ad.stop_gradient(draw.zeta), ad.stop_gradient(draw.log_q),
                          ad.stop_gradient(draw.log_q_sg), draw.log_z)
    lw_model = log_weights(x, model, fixed, lam, lz, sg_q=True)
    B = lw_path.shape[1]
    surrogate = (ad.sum_(coef * lw_path) + ad.sum_(wn * lw_model)) / B
    bound = float(np.mean(special.logsumexp(lw_path.data, axis=0)) - np.log(K))
    return surrogate, Value(bound)


def dreg_phi_grad(x, model, posterior, K: int, lam: float, rng, indices=None,
                  wrt: dict | None = None, draw: PosteriorDraw | None = None):
    """Doubly reparameterised encoder gradient as a :class:`GradEstimate`."""
    from .estimators import GradEstimate

    surrogate, bound = dreg_surrogate(x, model, posterior, K, lam, rng, indices, draw=draw)
    wrt = posterior.params if wrt is None else wrt
    g = ad.backward(surrogate) if surrogate.requires_grad else {}
    grads = {k: np.array(g.get(v, np.zeros(v.shape))) for k, v in wrt.items()}
    return GradEstimate(grads, {"samples": K * len(np.atleast_2d(x)), "bound": bound.item()})


# ---------------------------------------------------------------------------
# structured prediction
# ---------------------------------------------------------------------------

def structured_objective(x1, x2, model: GenerativeModel, enc: UndirectedEncoder,
                         chains: BinaryState, cfg, K: int, lam_h: float, rng,
                         logz_phi=None) -> Value:
    """``E_q(z|x1)[log (1/K) sum_i p(x2|z_i)] + lam_h H(q(z|x1))``, batch-averaged.

    ``chains`` holds ``K`` equilibrated chain states per example, shape
    ``(K, B, n)``.  The entropy is written ``E_q[E_phi] + log Z_phi``: the
    energy expectation is differentiated through the relaxed samples and
    directly, and ``log Z_phi`` is a node whose gradient is the chain's
    negative-phase moments.  ``logz_phi`` supplies its value per example
    (reporting only; zeros by default).
    """
    if not 0.0 < lam_h <= 1.0:
        raise ValueError("entropy weight must lie in (0, 1]")
    phi = encode_undirected(enc, x1)
    zeta = relaxed_posterior_sample(phi, chains, cfg, rng)
    z1, z2 = zeta[..., :phi.n1], zeta[..., phi.n1:]
    B = np.shape(x1)[0]
    recon = ad.logsumexp(bernoulli_log_lik(x2, model.decoder(zeta)), axis=0) - np.log(K)
    e_path = rbm_energy(phi.stop_gradient(), z1, z2)
    e_direct = rbm_energy(phi, ad.stop_gradient(z1), ad.stop_gradient(z2))
    lz_val = np.zeros(B) if logz_phi is None else np.asarray(logz_phi)
    lz = logz_node_amortized(phi, lz_val, chains)
    entropy = (ad.sum_(ad.mean(e_path + e_direct, axis=0) - ad.stop_gradient(ad.mean(e_direct, axis=0)))
               + lz) / B
    return ad.mean(recon) + lam_h * entropy


def entropy_estimate(phi: RbmParams, samples: BinaryState, logz) -> tuple[float, float]:
    """``mean E_phi(z) + log Z_phi`` from samples, with its standard error."""
    e = rbm_energy_np(phi.numpy(), samples.z1, samples.z2) + np.asarray(logz)
    return float(e.mean()), float(e.std(ddof=1) / np.sqrt(e.size))


# ---------------------------------------------------------------------------
# MCMC on the true posterior
# ---------------------------------------------------------------------------

def true_posterior_sweeps(x, model: GenerativeModel, z: np.ndarray, sweeps: int,
                          rng) -> np.ndarray:
    """Single-bit systematic-scan Gibbs on ``p(z|x)`` (batched over examples).

    Each bit update evaluates the decoder once, at the flipped state; the
    current state's log-likelihood is cached.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.array(z, dtype=np.float64)
    n1 = model.n1
    pr = model.prior.numpy()
    ll = model.log_lik(x, z).data
    n = z.shape[-1]
    for _ in range(sweeps):
        for j in range(n):
            flip = z.copy()
            flip[..., j] = 1.0 - flip[..., j]
            ll_flip = model.log_lik(x, flip).data
            if j < n1:
                field = pr.b1[j] + z[..., n1:] @ pr.W[j]
            else:
                field = pr.b2[j - n1] + z[..., :n1] @ pr.W[:, j - n1]
            # log-odds of bit = 1 against bit = 0
            ll1 = np.where(z[..., j] == 1.0, ll, ll_flip)
            ll0 = np.where(z[..., j] == 1.0, ll_flip, ll)
            logit = ll1 - ll0 - field
            new = (rng.random(z.shape[:-1]) < special.expit(logit)).astype(np.float64)
            changed = new != z[..., j]
            z[..., j] = new
            ll = np.where(changed, ll_flip, ll)
    return z


def mcmc_true_posterior_step(x, model: GenerativeModel, chain: np.ndarray, sweeps: int, rng,
                             logz_theta=None) -> tuple[Value, np.ndarray]:
    """Advance the chains and return ``mean log p(x, z)`` at the new states.

    ``z`` is a constant; the objective's gradient is the model-parameter
    gradient of the complete-data log-likelihood.
    """
    z = true_posterior_sweeps(x, model, chain, sweeps, rng)
    lz = Value(model.logz) if logz_theta is None else logz_theta
    obj = ad.mean(model.log_lik(x, z) - model.prior_energy(z)) - lz
    return obj, z


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _all_latents(n: int) -> np.ndarray:
    if n > ENUM_CAP:
        raise EnumerationError(f"cannot enumerate {n} latent bits (cap {ENUM_CAP})")
    return enumerate_states(n)


def _decoder_table(model: GenerativeModel, Z: np.ndarray, chunk: int = 8192):
    """Decoder logits and ``sum softplus`` for every latent state."""
    logits = np.concatenate([model.decoder(Z[i:i + chunk]).data for i in range(0, len(Z), chunk)])
    return logits, np.logaddexp(0.0, logits).sum(-1)


def exact_log_px(x, model: GenerativeModel, chunk: int = 4096) -> np.ndarray:
    """``log p(x)`` per example by enumerating every latent state."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Z = _all_latents(model.n1 + model.n2)
    pr = model.prior.numpy()
    log_prior = -rbm_energy_np(pr, Z[:, :model.n1], Z[:, model.n1:]) - rbm_exact_logz(pr)
    logits, sp = _decoder_table(model, Z)
    out = np.full(len(x), -np.inf)
    for i in range(0, len(Z), chunk):
        ll = x @ logits[i:i + chunk].T - sp[i:i + chunk]
        out = np.logaddexp(out, special.logsumexp(ll + log_prior[i:i + chunk], axis=1))
    return out


def exact_nll(x, model: GenerativeModel) -> float:
    """Mean negative log-likelihood by enumeration."""
    return float(-exact_log_px(x, model).mean())


def exact_elbo(x, model: GenerativeModel, enc: UndirectedEncoder, chunk: int = 64) -> np.ndarray:
    """Per-example ELBO with exact expectations under the posterior RBM."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n1, n2 = model.n1, model.n2
    Z = _all_latents(n1 + n2)
    pr = model.prior.numpy()
    log_prior = -rbm_energy_np(pr, Z[:, :n1], Z[:, n1:]) - rbm_exact_logz(pr)
    logits, sp = _decoder_table(model, Z)
    S1, S2 = enumerate_states(n1), enumerate_states(n2)
    out = np.empty(len(x))
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        phi = encode_undirected(enc, xb).numpy()
        neg_e = (-(phi.b1 @ S1.T)[:, :, None] - (phi.b2 @ S2.T)[:, None, :]
                 - np.matmul(np.matmul(S1, phi.W), S2.T))
        log_q = neg_e.reshape(len(xb), -1)
        log_q = log_q - special.logsumexp(log_q, axis=1, keepdims=True)
        q = np.exp(log_q)
        ll = xb @ logits.T - sp
        out[i:i + chunk] = np.sum(q * (ll + log_prior - log_q), axis=1)
    return out


def exact_posterior_table(x_row, model: GenerativeModel) -> np.ndarray:
    """True posterior ``p(z|x)`` over all latent states for one example."""
    return np.exp(exact_log_joint(x_row, model) - exact_log_px(x_row, model)[0])


def exact_log_joint(x_row, model: GenerativeModel) -> np.ndarray:
    Z = _all_latents(model.n1 + model.n2)
    pr = model.prior.numpy()
    log_prior = -rbm_energy_np(pr, Z[:, :model.n1], Z[:, model.n1:]) - rbm_exact_logz(pr)
    logits, sp = _decoder_table(model, Z)
    return np.asarray(x_row, dtype=np.float64) @ logits.T - sp + log_prior


def iw_eval_nll(x, model: GenerativeModel, posterior, K: int = 4000, rng=None,
                path: AnnealPath | None = None, prior_logz: float | None = None) -> float:
    """Importance-weighted bound on the mean NLL with discrete posterior samples.

    RBM posteriors use exact samples and log Z for enumerable sizes, and
    annealed samples and log-Z estimates otherwise.  Directed posteriors use
    ancestral binary samples.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pr = model.prior.numpy()
    if prior_logz is None:
        prior_logz = (rbm_exact_logz(pr) if pr.n1 <= ENUM_CAP
                      else ais_logz(pr, path or AnnealPath(1000), rng).mean)
    bounds = np.empty(len(x))
    for i, row in enumerate(x):
        if isinstance(posterior, DirectedEncoder):
            z, log_q = encode_directed(posterior, row[None], rng, None, n_samples=K)
            z, log_q = z.data[:, 0], log_q.data[:, 0]
        else:
            phi = encode_undirected(posterior, row[None]).select(0)
            z, log_q = _sample_rbm_posterior(phi, K, rng, path)
        ll = model.log_lik(row, z).data
        log_p = -rbm_energy_np(pr, z[:, :pr.n1], z[:, pr.n1:]) - prior_logz
        if not np.all(np.isfinite(log_q)):
            raise FloatingPointError("posterior log-partition estimate failed")
        bounds[i] = special.logsumexp(ll + log_p - log_q) - np.log(K)
    return float(-bounds.mean())


def _sample_rbm_posterior(phi: RbmParams, K: int, rng, path: AnnealPath | None):
    if phi.n1 + phi.n2 <= ENUM_CAP:
        from .ugm import rbm_log_prob_table
        table = rbm_log_prob_table(phi)
        idx = rng.choice(len(table), size=K, p=np.exp(table - special.logsumexp(table)))
        z1, z2 = joint_states(phi.n1, phi.n2)
        return np.concatenate([z1[idx], z2[idx]], axis=-1), table[idx]
    path = path or AnnealPath(1000, population_size=K)
    s, _ = sample_prior(phi, path, K, rng, return_logz=True)
    log_z = ais_logz(phi, path, rng).mean
    log_q = -rbm_energy_np(phi, s.z1, s.z2) - log_z
    return s.concat(), log_q
