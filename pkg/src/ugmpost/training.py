"""Training loop, metrics and the binary checkpoint format."""
from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Adam, Value
from .estimators import EstimatorConfig
from .gibbs import AnnealPath, ChainStore, ais_logz, sample_prior, update_persistent
from .models import (AnnealSchedule, _sample_rbm_posterior, bernoulli_log_lik, DirectedEncoder, DirectedPosterior, GenerativeModel,
                     RbmPosterior, UndirectedEncoder, dreg_surrogate, elbo_surrogate,
                     encode_directed, encode_undirected, exact_elbo, exact_nll, iw_eval_nll,
                     logz_node, mcmc_true_posterior_step, structured_objective)
from .relax import RelaxationConfig
from .ugm import ENUM_CAP, BinaryState, rbm_exact_logz

METRIC_FIELDS = ("epoch", "elbo", "nll_bound", "logz_theta", "wall_ms")

_CKPT_MAGIC = b"UGMP"
_CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict) -> None:
    """Write ``magic, version, count`` then ``name, shape, float64 data`` per tensor.

    All integers and doubles are little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(ad.to_numpy(tensors[name]), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            name = blob[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", blob, off)
            shape = struct.unpack_from(f"<{ndim}I", blob, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(blob):
                raise ValueError("truncated checkpoint")
            out[name] = np.frombuffer(blob, "<f8", size // 8, off).reshape(shape).copy()
            off += size
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    return out


def restore_params(params: dict, tensors: dict) -> None:
    """Copy checkpoint tensors into matching leaf Values."""
    for name, v in params.items():
        if name not in tensors:
            raise KeyError(f"checkpoint lacks {name}")
        if tensors[name].shape != v.shape:
            raise ValueError(f"shape mismatch for {name}")
        data = np.array(tensors[name])
        data.setflags(write=False)
        v.data = data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters of a training run.

    ``objective`` is ``elbo`` (relaxed-Gibbs ELBO), ``iw`` (annealed
    importance-weighted bound with doubly reparameterised encoder
    gradients), ``mcmc`` (true-posterior MCMC, no encoder) or
    ``structured`` (predict the lower half of an image from the upper half).
    """

    n1: int = 8
    n2: int = 8
    enc_hidden: tuple = (100,)
    dec_hidden: tuple = (100,)
    objective: str = "elbo"
    posterior: str = "rbm"
    freeze_w: bool = False
    groups: int = 1
    context: int = 200
    s: int = 10
    t: int = 1
    relaxation: str = "pwl"
    sharpness: float = 0.1
    K: int = 1
    lr: float = 3e-4
    batch_size: int = 100
    epochs: int = 10
    warmup_steps: int = 0
    lam_h_start: float = 1.0
    lam_h_end: float = 0.05
    prior_temps: int = 20
    prior_population: int = 100
    mcmc_sweeps: int = 10
    batch_norm: bool = False
    seed: int = 0
    eval_every: int = 0
    eval_size: int = 1000
    eval_k: int = 100

    def __post_init__(self):
        if self.objective not in ("elbo", "iw", "mcmc", "structured"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.posterior not in ("rbm", "directed"):
            raise ValueError(f"unknown posterior {self.posterior!r}")
        self.enc_hidden = tuple(self.enc_hidden)
        self.dec_hidden = tuple(self.dec_hidden)

    @property
    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(self.s, self.t, False, RelaxationConfig(self.relaxation, self.sharpness))


@dataclass
class TrainResult:
    model: GenerativeModel
    encoder: object
    metrics: list
    store: ChainStore | None
    step_ms: list = field(default_factory=list)
    diverged: bool = False

    @property
    def mean_step_ms(self) -> float:
        return float(np.mean(self.step_ms)) if self.step_ms else float("nan")


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init, order, noise, prior, evals = ss.spawn(5)
    return tuple(np.random.default_rng(s) for s in (init, order, noise, prior, evals))


def build(cfg: TrainConfig, n_in: int, rng):
    """Construct the generative model and encoder for ``cfg``."""
    n_obs = n_in
    if cfg.objective == "structured":
        n_obs = n_in - n_in // 2
        n_in = n_in // 2
    model = GenerativeModel(cfg.n1, cfg.n2, n_obs, cfg.dec_hidden, rng, cfg.batch_norm)
    if cfg.objective == "mcmc":
        return model, None
    if cfg.posterior == "directed":
        enc = DirectedEncoder(n_in, cfg.n1 + cfg.n2, cfg.groups, rng, cfg.context, cfg.batch_norm)
    else:
        enc = UndirectedEncoder(n_in, cfg.enc_hidden, cfg.n1, cfg.n2, rng, cfg.freeze_w,
                                cfg.batch_norm)
    return model, enc


def _prior_logz(model: GenerativeModel, rng) -> float:
    pr = model.prior.numpy()
    if pr.n1 <= ENUM_CAP:
        return float(rbm_exact_logz(pr))
    return float(ais_logz(pr, AnnealPath(1000), rng).mean)


def evaluate(model: GenerativeModel, enc, x: np.ndarray, cfg: TrainConfig, rng) -> dict:
    """ELBO, NLL bound and prior log Z on ``x`` (exact where enumerable)."""
    model.logz = _prior_logz(model, rng)
    n = cfg.n1 + cfg.n2
    xe, xo = (x[:, :x.shape[1] // 2], x[:, x.shape[1] // 2:]) if cfg.objective == "structured" else (x, x)
    out = {"logz_theta": model.logz, "elbo": float("nan"), "nll_bound": float("nan")}
    if cfg.objective == "structured":
        # conditional log-likelihood bound of the lower half
        phi = encode_undirected(enc, xe)
        K = cfg.eval_k
        vals = []
        for i in range(len(xe)):
            z, _ = _sample_rbm_posterior(phi.select(i), K, rng, None)
            ll = bernoulli_log_lik(xo[i], model.decoder(z)).data
            vals.append(special.logsumexp(ll) - np.log(K))
        out["nll_bound"] = float(-np.mean(vals))
        return out
    if n <= ENUM_CAP:
        out["nll_bound"] = exact_nll(x, model)
        if isinstance(enc, UndirectedEncoder):
            out["elbo"] = float(exact_elbo(x, model, enc).mean())
    else:
        if enc is not None:
            out["nll_bound"] = iw_eval_nll(x, model, enc, cfg.eval_k, rng, prior_logz=model.logz)
    if isinstance(enc, DirectedEncoder):
        z, log_q = encode_directed(enc, x, rng, None, n_samples=cfg.eval_k)
        lp = -model.prior_energy(z).data - model.logz
        out["elbo"] = float(np.mean(model.log_lik(x, z).data + lp - log_q.data))
    return out


def train(data: np.ndarray, cfg: TrainConfig, out_dir=None, eval_data: np.ndarray | None = None,
          log=None) -> TrainResult:
    """Adam training loop; one metrics row per evaluated epoch.

    ``eval_data`` defaults to the first ``cfg.eval_size`` training rows.  With
    ``out_dir`` the metrics CSV, the checkpoint and the chain store are
    written there.  A non-finite objective stops training; the last finite
    parameters are checkpointed and ``diverged`` is set.
    """
    data = np.asarray(data, dtype=np.float64)
    init_rng, order_rng, noise_rng, prior_rng, eval_rng = _streams(cfg.seed)
    model, enc = build(cfg, data.shape[1], init_rng)
    params = dict(model.params)
    if enc is not None:
        params.update(enc.params)
    opt = Adam(params.values(), lr=cfg.lr)
    store = None if cfg.objective == "mcmc" else ChainStore(cfg.n1, cfg.n2, cfg.seed)
    mcmc_chains = (order_rng.random((len(data), cfg.n1 + cfg.n2)) < 0.5).astype(np.float64)
    schedule = AnnealSchedule(cfg.warmup_steps)
    path = AnnealPath(cfg.prior_temps, cfg.prior_population)
    est = cfg.estimator
    eval_x = data[:cfg.eval_size] if eval_data is None else np.asarray(eval_data, dtype=np.float64)
    metrics, step_ms = [], []
    wall = 0.0
    step = 0
    diverged = False
    n_batches = max(1, len(data) // cfg.batch_size)
    half = data.shape[1] // 2
    posterior = None
    if cfg.objective == "iw":
        posterior = (DirectedPosterior(enc, est.relaxation) if cfg.posterior == "directed"
                     else RbmPosterior(enc, est, store))
    total_steps = cfg.epochs * n_batches
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(data))
        for b in range(n_batches):
            idx = np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            xb = data[idx]
            t0 = time.perf_counter()
            lam = schedule.value(step)
            samples, lz_est = sample_prior(model.prior, path, cfg.prior_population, prior_rng,
                                           return_logz=True)
            model.logz = lz_est
            lz = logz_node(model.prior, model.logz, samples)
            try:
                if cfg.objective == "elbo":
                    phi = encode_undirected(enc, xb)
                    chain = update_persistent(store, idx, phi.numpy(), est.s)
                    obj = elbo_surrogate(xb, model, enc, chain, est, noise_rng, lz, lam, phi).objective
                elif cfg.objective == "iw":
                    obj, _ = dreg_surrogate(xb, model, posterior, cfg.K, lam, noise_rng, idx, lz)
                elif cfg.objective == "mcmc":
                    obj, mcmc_chains[idx] = mcmc_true_posterior_step(
                        xb, model, mcmc_chains[idx], cfg.mcmc_sweeps, noise_rng, lz)
                else:
                    x1, x2 = xb[:, :half], xb[:, half:]
                    phi = encode_undirected(enc, x1)
                    keys = (idx[None, :] * cfg.K + np.arange(cfg.K)[:, None]).reshape(-1)
                    pn = phi.numpy()
                    tiled = type(pn)(np.tile(pn.b1, (cfg.K, 1)), np.tile(pn.b2, (cfg.K, 1)),
                                     np.tile(pn.W, (cfg.K, 1, 1)))
                    ch = update_persistent(store, keys, tiled, est.s)
                    ch = BinaryState(ch.z1.reshape(cfg.K, len(idx), -1), ch.z2.reshape(cfg.K, len(idx), -1))
                    frac = step / max(1, total_steps - 1)
                    lam_h = cfg.lam_h_start + (cfg.lam_h_end - cfg.lam_h_start) * frac
                    obj = structured_objective(x1, x2, model, enc, ch, est, cfg.K, lam_h, noise_rng)
                grads = ad.backward(obj)
            except FloatingPointError:
                diverged = True
                break
            opt.step(grads, ascent=True)
            dt = time.perf_counter() - t0
            step_ms.append(dt * 1e3)
            wall += dt
            step += 1
        if diverged:
            break
        if epoch == cfg.epochs or (cfg.eval_every and epoch % cfg.eval_every == 0):
            row = {"epoch": epoch, **evaluate(model, enc, eval_x, cfg, eval_rng),
                   "wall_ms": round(wall * 1e3, 3)}
            metrics.append(row)
            if log is not None:
                log(row)
    result = TrainResult(model, enc, metrics, store, step_ms, diverged)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", result.metrics)
    tensors = dict(result.model.params)
    if result.encoder is not None:
        tensors.update(result.encoder.params)
    save_checkpoint(out / "checkpoint.bin", tensors)
    if result.store is not None:
        result.store.save(out / "chains.bin")


def write_metrics(path, rows: list, fields=METRIC_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
