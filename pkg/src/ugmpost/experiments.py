"""Configured, reproducible experiment runners and run comparison.

A run is fully determined by its INI configuration (including the seed).
Outputs go to the run's directory: ``config.ini``, ``summary.json`` and
CSV files (metrics and plot data), plus checkpoints for trained models.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from . import analysis, toys
from .data import DatasetSpec, load_dataset
from .estimators import (EstimatorConfig, estimate_grad_rbm, grad_probe, gaussian_from_raw,
                         raw_from_gaussian)
from .relax import RelaxationConfig
from .training import (METRIC_FIELDS, TrainConfig, build, evaluate, load_checkpoint,
                       restore_params, train, write_metrics)
from .ugm import RbmParams

KINDS = ("toy-gaussian", "toy-rbm-mixture", "vae", "iwae", "structured", "mcmc-baseline",
         "modes", "logz-study", "grad-study")

_OBJECTIVE = {"vae": "elbo", "iwae": "iw", "structured": "structured", "mcmc-baseline": "mcmc",
              "modes": "elbo"}


class ConfigError(ValueError):
    pass


class ExperimentConfig:
    """Sectioned ``key = value`` configuration with typed accessors."""

    def __init__(self, text: str = ""):
        self._cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        self._cp.optionxform = str
        self._cp.read_string(text)
        if not self._cp.has_section("experiment"):
            self._cp.add_section("experiment")
        kind = self.kind
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"missing config file {path}")
        return cls(path.read_text())

    @property
    def kind(self) -> str:
        return self._cp.get("experiment", "kind", fallback="")

    @property
    def seed(self) -> int:
        return self.get_int("experiment", "seed", 0)

    def set(self, section: str, key: str, value) -> None:
        if not self._cp.has_section(section):
            self._cp.add_section(section)
        self._cp.set(section, key, str(value))

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value``."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
        lhs, value = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        self.set(section, key.strip(), value.strip())

    def has(self, section: str, key: str) -> bool:
        return self._cp.has_option(section, key)

    def get_str(self, section: str, key: str, default: str | None = None) -> str:
        if not self.has(section, key):
            if default is None:
                raise ConfigError(f"missing {section}.{key}")
            return default
        return self._cp.get(section, key)

    def get_int(self, section: str, key: str, default: int | None = None) -> int:
        return int(self.get_str(section, key, None if default is None else str(default)))

    def get_float(self, section: str, key: str, default: float | None = None) -> float:
        return float(self.get_str(section, key, None if default is None else repr(default)))

    def get_bool(self, section: str, key: str, default: bool = False) -> bool:
        return self.get_str(section, key, str(default)).strip().lower() in ("1", "true", "yes", "on")

    def get_list(self, section: str, key: str, default: str, cast=int) -> list:
        raw = self.get_str(section, key, default)
        return [cast(v.strip()) for v in raw.split(",") if v.strip()]

    def text(self) -> str:
        """Canonical serialisation (sorted sections and keys)."""
        out = io.StringIO()
        for section in sorted(self._cp.sections()):
            out.write(f"[{section}]\n")
            for key in sorted(self._cp.options(section)):
                out.write(f"{key} = {self._cp.get(section, key)}\n")
            out.write("\n")
        return out.getvalue()

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical text."""
        body = self.text().encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    # typed views -----------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        sub = self.get_str("data", "subset", "")
        return DatasetSpec(
            source=self.get_str("data", "source", "sklearn-digits"),
            binarization=self.get_str("data", "binarization", "threshold-0.5"),
            subset=int(sub) if sub else None,
            downsample=self.get_int("data", "downsample", 1),
            root=self.get_str("data", "root", "") or None,
            seed=self.get_int("data", "seed", 0),
            side=self.get_int("data", "side", 4),
            components=self.get_int("data", "components", 3),
            size=self.get_int("data", "size", 1000),
            sha256=self.get_str("data", "sha256", "") or None,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        d = TrainConfig()
        g = lambda key, cast, default: cast(self.get_str("train", key, str(default)))
        hid = lambda key, default: tuple(self.get_list("model", key, ",".join(map(str, default))))
        return TrainConfig(
            n1=self.get_int("model", "n1", d.n1), n2=self.get_int("model", "n2", d.n2),
            enc_hidden=hid("enc_hidden", d.enc_hidden), dec_hidden=hid("dec_hidden", d.dec_hidden),
            objective=self.get_str("train", "objective", _OBJECTIVE.get(self.kind, "elbo")),
            posterior=self.get_str("model", "posterior", d.posterior),
            freeze_w=self.get_bool("model", "freeze_w", d.freeze_w),
            groups=self.get_int("model", "groups", d.groups),
            context=self.get_int("model", "context", d.context),
            s=g("s", int, d.s), t=g("t", int, d.t),
            relaxation=self.get_str("train", "relaxation", d.relaxation),
            sharpness=g("sharpness", float, d.sharpness), K=g("K", int, d.K),
            lr=g("lr", float, d.lr), batch_size=g("batch_size", int, d.batch_size),
            epochs=g("epochs", int, d.epochs), warmup_steps=g("warmup_steps", int, d.warmup_steps),
            lam_h_start=g("lam_h_start", float, d.lam_h_start),
            lam_h_end=g("lam_h_end", float, d.lam_h_end),
            prior_temps=g("prior_temps", int, d.prior_temps),
            prior_population=g("prior_population", int, d.prior_population),
            mcmc_sweeps=g("mcmc_sweeps", int, d.mcmc_sweeps),
            batch_norm=self.get_bool("model", "batch_norm", d.batch_norm),
            seed=self.seed if seed is None else seed,
            eval_every=g("eval_every", int, d.eval_every),
            eval_size=g("eval_size", int, d.eval_size), eval_k=g("eval_k", int, d.eval_k),
        )

    def seeds(self) -> list[int]:
        return self.get_list("experiment", "seeds", str(self.seed))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_rows(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
            "n": int(len(v))}


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def _run_training(cfg: ExperimentConfig, out: Path) -> dict:
    splits = load_dataset(cfg.dataset_spec())
    per_seed = {}
    for seed in cfg.seeds():
        tc = cfg.train_config(seed)
        res = train(splits.train, tc, out / f"seed{seed}")
        final = dict(res.metrics[-1]) if res.metrics else {}
        final["mean_step_ms"] = res.mean_step_ms
        final["diverged"] = res.diverged
        per_seed[str(seed)] = final
    summary = {"per_seed": per_seed}
    for key in ("elbo", "nll_bound", "logz_theta"):
        vals = [r[key] for r in per_seed.values() if key in r and np.isfinite(r[key])]
        if vals:
            summary[key] = _mean_std(vals)
    return summary


def _run_toy_gaussian(cfg: ExperimentConfig, out: Path) -> dict:
    iters = cfg.get_int("toy", "iterations", 2000)
    lr = cfg.get_float("toy", "lr", 0.01)
    every = cfg.get_int("toy", "record_every", 100)
    trials = cfg.get_int("toy", "probe_trials", 20)
    ts = cfg.get_list("toy", "ts", "1,2,4,8")
    methods = [("reinforce", 1), ("reparam", 1)] + [("term2", t) for t in ts] + [("term12", 1)]
    curve_rows, probe_rows, finals = [], [], {}
    target = toys.toy_target()
    for method, t in methods:
        key = f"{method}-t{t}" if method.startswith("term") else method
        for seed in cfg.seeds():
            curve = toys.run_gaussian_toy(method, t, seed, iters, lr, record_every=every)
            curve_rows += [(method, t, seed, int(i), float(k)) for i, k in zip(curve.iterations, curve.kl)]
            finals.setdefault(key, []).append(curve.final)
        # gradient error along one trajectory (seed = first seed), at the start point
        rng = np.random.default_rng(cfg.seed + 1000)
        raw = toys.gaussian_start()
        ref = toys.analytic_kl_grad(raw, target)
        from .autodiff import Value
        probe = grad_probe(lambda: toys.gaussian_gradient(method, Value(raw, True), target, rng, t)[0],
                           ref, trials)
        probe_rows.append((method, t, probe.bias_l2, probe.mean_variance, float(probe.l2_errors.mean())))
    _write_rows(out / "kl_curves.csv", ["method", "t", "seed", "iteration", "kl"], curve_rows)
    _write_rows(out / "grad_l2.csv", ["method", "t", "bias_l2", "mean_variance", "mean_l2_error"],
                probe_rows)
    return {"final_kl": {k: _mean_std(v) for k, v in finals.items()}}


def _run_toy_rbm_mixture(cfg: ExperimentConfig, out: Path) -> dict:
    iters = cfg.get_int("toy", "iterations", 10_000)
    lr = cfg.get_float("toy", "lr", 0.003)
    s = cfg.get_int("toy", "s", 10)
    chains = cfg.get_int("toy", "chains", 256)
    every = cfg.get_int("toy", "record_every", 100)
    ts = cfg.get_list("toy", "ts", "1,2,4")
    relax = RelaxationConfig(cfg.get_str("toy", "relaxation", "pwl"),
                             cfg.get_float("toy", "sharpness", 0.1))
    mix_seed = cfg.get_int("toy", "mixture_seed", 0)
    oracle, _ = toys.global_min_kl(toys.mixture_target(mix_seed), starts=cfg.get_int("toy", "oracle_starts", 20))
    rows, finals = [], {}
    for t in ts:
        for seed in cfg.seeds():
            c = toys.run_rbm_mixture_toy(t, seed, iters, lr, s=s, n_chains=chains, relaxation=relax,
                                         record_every=every, mixture_seed=mix_seed)
            rows += [(t, seed, int(i), float(k)) for i, k in zip(c.iterations, c.kl)]
            finals.setdefault(f"t{t}", []).append(c.final)
    _write_rows(out / "kl_curves.csv", ["t", "seed", "iteration", "kl"], rows)
    return {"oracle_min_kl": oracle, "final_kl": {k: _mean_std(v) for k, v in finals.items()}}


def _run_modes(cfg: ExperimentConfig, out: Path) -> dict:
    splits = load_dataset(cfg.dataset_spec())
    tc = cfg.train_config()
    ckpt = cfg.get_str("modes", "checkpoint", "")
    if ckpt:
        model, enc = build(tc, splits.train.shape[1], np.random.default_rng(tc.seed))
        tensors = load_checkpoint(ckpt)
        restore_params({**model.params, **enc.params}, tensors)
    else:
        res = train(splits.train, tc, out / "model")
        model, enc = res.model, res.encoder
    from .models import encode_undirected

    n_examples = cfg.get_int("modes", "examples", 100)
    n_init = cfg.get_int("modes", "n_init", 100)
    radius = cfg.get_float("modes", "dedupe_radius", 1e-3)
    phi = encode_undirected(enc, splits.train[:n_examples]).numpy()
    rng = np.random.default_rng(cfg.seed)
    reports, counts, kls = [], [], []
    for i in range(len(phi.b1)):
        modes = analysis.count_modes(phi.select(i), n_init, radius, rng=rng)
        counts.append(len(modes))
        kls += [m.kl for m in modes]
        reports.append({"example": i, "modes": [m.to_dict() for m in modes]})
    (out / "modes.json").write_text(json.dumps(reports, indent=1))
    hist = {str(k): int(v) for k, v in zip(*np.unique(counts, return_counts=True))}
    return {"mode_count_histogram": hist, "single_mode_fraction": float(np.mean(np.array(counts) == 1)),
            "kl_quartiles": [float(q) for q in np.percentile(kls, [25, 50, 75])]}


def _study_rbm(cfg: ExperimentConfig, which: str, rng) -> RbmParams:
    defaults = {"bias": (0.3, 3.0), "coupling": (1.5, 0.3)}[which]
    w = cfg.get_float("logz", f"{which}_weight_scale", defaults[0])
    b = cfg.get_float("logz", f"{which}_bias_scale", defaults[1])
    n = cfg.get_int("logz", "units", 8)
    return RbmParams.random(n, n, rng, scale=w, bias_scale=b)


def _run_logz_study(cfg: ExperimentConfig, out: Path) -> dict:
    counts = cfg.get_list("logz", "temp_counts", "4,8,16,32,64,128,256,512,1024,2048")
    repeats = cfg.get_int("logz", "repeats", 10)
    pop = cfg.get_int("logz", "population", 256)
    target = cfg.get_float("logz", "target_std", 1e-2)
    rng = np.random.default_rng(cfg.seed)
    result = {}
    for which in ("bias", "coupling"):
        p = _study_rbm(cfg, which, np.random.default_rng(cfg.get_int("logz", "model_seed", 5)))
        rows = analysis.logz_sweep_study(p, counts, repeats, pop, rng)
        analysis.write_sweep_csv(rows, out / f"logz_{which}.csv")
        result[f"{which}_temps_needed"] = analysis.temps_needed(rows, target)
    nb, nc = result["bias_temps_needed"], result["coupling_temps_needed"]
    result["ratio"] = (nc / nb) if nb and nc else None
    return result


def grad_study_discrete(seed: int, calls: int, sharpness: float = 0.01, s: int = 200,
                        kind: str = "pwl", n_x: int = 8, chunk: int = 25_000) -> dict:
    """Averaged relaxed-Gibbs gradient of a fixed linear ``f`` on an amortized 2+2 posterior.

    A small encoder maps ``n_x`` fixed inputs to weakly coupled RBMs; each
    call estimates the batch-mean gradient for the encoder weights.  The
    exact gradient differentiates the enumerated expectation.
    """
    from . import autodiff as ad
    from .autodiff import Value
    from .models import UndirectedEncoder, encode_undirected
    from .ugm import BinaryState, joint_states, rbm_energy

    rng = np.random.default_rng(seed)
    enc = UndirectedEncoder(3, (4,), 2, 2, rng, w_scale=0.2)
    x = rng.normal(size=(n_x, 3))
    c1, c2 = rng.normal(size=2), rng.normal(size=2)
    params = enc.params

    def f(z1, z2):
        return ad.sum_(z1 * c1, axis=-1) + ad.sum_(z2 * c2, axis=-1)

    # exact: d/dw mean_x sum_z q(z|x) f(z)
    phi = encode_undirected(enc, x)
    Z1, Z2 = joint_states(2, 2)
    b1 = ad.reshape(phi.b1, (n_x, 1, 2))
    b2 = ad.reshape(phi.b2, (n_x, 1, 2))
    Wb = ad.reshape(phi.W, (n_x, 1, 2, 2))
    neg_e = -rbm_energy(RbmParams(b1, b2, Wb), Z1, Z2)
    log_q = neg_e - ad.logsumexp(neg_e, axis=-1, keepdims=True)
    exact_obj = ad.mean(ad.sum_(ad.exp(log_q) * f(Value(Z1), Value(Z2)).data, axis=-1))
    g = ad.backward(exact_obj)
    exact = np.concatenate([g[v].ravel() for v in params.values()])

    cfg = EstimatorConfig(s=s, t=1, relaxation=RelaxationConfig(kind, sharpness))
    total = np.zeros_like(exact)
    done = 0
    while done < calls:
        m = min(chunk, calls - done)
        phi = encode_undirected(enc, x)
        shape = lambda v: ad.broadcast(ad.reshape(v, (1,) + v.shape), (m,) + v.shape)
        phib = RbmParams(shape(phi.b1), shape(phi.b2), shape(phi.W))
        chain = BinaryState((rng.random((m, n_x, 2)) < 0.5) * 1.0, (rng.random((m, n_x, 2)) < 0.5) * 1.0)

        def fb(z1, z2):
            # per call: mean over the x batch
            return ad.mean(f(z1, z2), axis=-1)

        est = estimate_grad_rbm(fb, phib, chain, cfg, rng, wrt=params)
        total += est.flat(list(params)) * m
        done += m
    mean = total / calls
    rel = float(np.linalg.norm(mean - exact) / np.linalg.norm(exact))
    return {"relative_l2": rel, "exact": exact.tolist(), "estimate": mean.tolist()}


def _run_grad_study(cfg: ExperimentConfig, out: Path) -> dict:
    from .autodiff import Value

    trials = cfg.get_int("grad", "trials", 2000)
    ts = cfg.get_list("grad", "ts", "1,2,4,8")
    target = toys.toy_target()
    raw = raw_from_gaussian(np.array(cfg.get_list("grad", "mu", "0.5,1.5", float)),
                            np.array(cfg.get_list("grad", "lam", "1.0,0.5,0.5,1.0", float)).reshape(2, 2))
    ref = toys.analytic_kl_grad(raw, target)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for method, t in [("reinforce", 1), ("reparam", 1)] + [("term2", t) for t in ts] + \
                     [("term12", t) for t in ts]:
        probe = grad_probe(lambda: toys.gaussian_gradient(method, Value(raw, True), target, rng, t)[0],
                           ref, trials)
        rows.append((method, t, probe.bias_l2, probe.mean_variance, float(probe.l2_errors.mean()),
                     float(np.linalg.norm(probe.stderr))))
    _write_rows(out / "grad_study.csv",
                ["method", "t", "bias_l2", "mean_variance", "mean_l2_error", "bias_se"], rows)
    disc = grad_study_discrete(cfg.seed, cfg.get_int("grad", "discrete_calls", 100_000),
                               cfg.get_float("grad", "sharpness", 0.01), cfg.get_int("grad", "s", 200))
    return {"gaussian": {f"{r[0]}-t{r[1]}": {"bias_l2": r[2], "mean_variance": r[3]} for r in rows},
            "discrete_relative_l2": disc["relative_l2"]}


_RUNNERS = {
    "toy-gaussian": _run_toy_gaussian, "toy-rbm-mixture": _run_toy_rbm_mixture,
    "vae": _run_training, "iwae": _run_training, "structured": _run_training,
    "mcmc-baseline": _run_training, "modes": _run_modes, "logz-study": _run_logz_study,
    "grad-study": _run_grad_study,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run ``cfg`` and write its artifacts; returns the JSON summary."""
    out = Path(out_dir or cfg.get_str("experiment", "out", f"runs/{cfg.kind}"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.text())
    try:
        results = _RUNNERS[cfg.kind](cfg, out)
    except Exception as exc:
        raise RuntimeError(f"{cfg.kind} experiment failed: {exc}") from exc
    summary = {"kind": cfg.kind, "seed": cfg.seed, "config_hash": cfg.content_hash(),
               "results": results}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return summary


def evaluate_run(run_dir, split: str = "test") -> dict:
    """Reload every seed's checkpoint of a training run and evaluate on a split."""
    run = Path(run_dir)
    cfg = ExperimentConfig.from_file(run / "config.ini")
    splits = load_dataset(cfg.dataset_spec())
    x = getattr(splits, split)
    out = {}
    for seed in cfg.seeds():
        tc = cfg.train_config(seed)
        model, enc = build(tc, splits.train.shape[1], np.random.default_rng(tc.seed))
        params = dict(model.params)
        if enc is not None:
            params.update(enc.params)
        restore_params(params, load_checkpoint(run / f"seed{seed}" / "checkpoint.bin"))
        out[str(seed)] = evaluate(model, enc, x, tc, np.random.default_rng(tc.seed))
    return out


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def _final_metrics(run_dir: Path) -> tuple[dict, list]:
    files = sorted(run_dir.glob("seed*/metrics.csv")) or sorted(run_dir.glob("metrics.csv"))
    if not files:
        raise FileNotFoundError(f"no metrics.csv under {run_dir}")
    finals, header = {}, None
    for f in files:
        with open(f, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            if header is None:
                header = reader.fieldnames
            elif reader.fieldnames != header:
                raise ValueError(f"schema mismatch inside {run_dir}")
        if rows:
            finals[f.parent.name if f.parent != run_dir else "run"] = rows[-1]
    return finals, header


def compare_runs(dir_a, dir_b, metric: str, direction: str = "max") -> dict:
    """Paired comparison of the final ``metric`` of two runs, seed by seed.

    ``delta = a - b``; with ``direction="max"`` a positive mean delta favours
    ``a``.  The verdict is a tie when ``|mean delta|`` is within two standard
    errors.
    """
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    fa, ha = _final_metrics(Path(dir_a))
    fb, hb = _final_metrics(Path(dir_b))
    if ha != hb:
        raise ValueError(f"schema mismatch: {ha} vs {hb}")
    if metric not in ha:
        raise KeyError(f"metric {metric!r} not in columns {ha}")
    keys = sorted(set(fa) & set(fb))
    if not keys:
        raise ValueError("no common seeds to pair")
    a = np.array([float(fa[k][metric]) for k in keys])
    b = np.array([float(fb[k][metric]) for k in keys])
    d = a - b
    se = d.std(ddof=1) / np.sqrt(len(d)) if len(d) > 1 else 0.0
    signed = d.mean() if direction == "max" else -d.mean()
    if abs(d.mean()) <= 2 * se or d.mean() == 0:
        verdict = "tie"
    else:
        verdict = "a" if signed > 0 else "b"
    return {"metric": metric, "direction": direction, "seeds": keys, "a": _mean_std(a),
            "b": _mean_std(b), "delta": _mean_std(d), "deltas": d.tolist(), "verdict": verdict}
