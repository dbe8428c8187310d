"""Continuous relaxations of Bernoulli draws and the relaxed Gibbs sweep."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .ugm import RbmParams, rbm_cond_logits

EPS_CLIP = 1e-7


@dataclass(frozen=True)
class RelaxationConfig:
    """``kind`` is ``"pwl"`` (ramp width) or ``"concrete"`` (temperature)."""

    kind: str = "pwl"
    sharpness: float = 0.1

    def __post_init__(self):
        if self.kind not in ("pwl", "concrete"):
            raise ValueError(f"unknown relaxation {self.kind!r}")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")


def relax_bernoulli(cfg: RelaxationConfig, logit, eps) -> Value:
    """Reparameterised relaxation of ``z ~ Bernoulli(sigmoid(logit))``.

    Concrete: ``sigmoid((logit + log eps - log(1 - eps)) / tau)``.
    PWL: ``clamp((eps - (1 - q)) / width, 0, 1)`` with ``q = sigmoid(logit)``.
    Both tend to ``1[eps > 1 - q]`` as the sharpness goes to zero.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps <= 0.0) or np.any(eps >= 1.0):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    eps = np.clip(eps, EPS_CLIP, 1.0 - EPS_CLIP)
    logit = ad.as_value(logit)
    if cfg.kind == "concrete":
        noise = np.log(eps) - np.log1p(-eps)
        return ad.sigmoid((logit + noise) / cfg.sharpness)
    q = ad.sigmoid(logit)
    return ad.clamp((eps - (1.0 - q)) / cfg.sharpness, 0.0, 1.0)


def relaxed_gibbs_sweep(p: RbmParams, z2_cond, cfg: RelaxationConfig, eps1, eps2):
    """One relaxed sweep ``zeta1 | z2_cond`` then ``zeta2 | zeta1``.

    The second conditional is evaluated at the continuous ``zeta1``, so
    gradients reach ``p`` through both draws.
    """
    zeta1 = relax_bernoulli(cfg, rbm_cond_logits(p, 1, z2_cond), eps1)
    zeta2 = relax_bernoulli(cfg, rbm_cond_logits(p, 2, zeta1), eps2)
    return zeta1, zeta2


def relaxed_gibbs_chain(p: RbmParams, z2_cond, cfg: RelaxationConfig, eps_list):
    """``t = len(eps_list)`` relaxed sweeps, each conditioning on the last ``zeta2``.

    ``z2_cond`` is the layer-2 part of a stop-gradient chain state.
    """
    if not eps_list:
        raise ValueError("need at least one relaxed sweep")
    cond = ad.stop_gradient(z2_cond)
    zeta1 = zeta2 = None
    for eps1, eps2 in eps_list:
        zeta1, zeta2 = relaxed_gibbs_sweep(p, cond, cfg, eps1, eps2)
        cond = zeta2
    return zeta1, zeta2


def draw_sweep_noise(rng, batch_shape: tuple, n1: int, n2: int, t: int):
    """Uniform noise for ``t`` sweeps, kept strictly inside (0, 1)."""
    out = []
    for _ in range(t):
        u1 = rng.uniform(EPS_CLIP, 1.0 - EPS_CLIP, batch_shape + (n1,))
        u2 = rng.uniform(EPS_CLIP, 1.0 - EPS_CLIP, batch_shape + (n2,))
        out.append((u1, u2))
    return out
