"""Command-line entry point: ``ugmpost <verb> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import ConfigError, ExperimentConfig, compare_runs, evaluate_run, run_experiment

CONFIG_DIR = Path(__file__).resolve().parent / "configs"

_VERB_KIND = {
    "toy-gaussian": "toy-gaussian",
    "toy-rbm-mixture": "toy-rbm-mixture",
    "modes": "modes",
    "logz-study": "logz-study",
    "grad-study": "grad-study",
}


def _load(args, kind: str | None) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    elif kind is not None:
        cfg = ExperimentConfig.from_file(CONFIG_DIR / f"{kind}.ini")
    else:
        raise ConfigError("train needs --config")
    if kind is not None and cfg.kind != kind:
        raise ConfigError(f"config kind {cfg.kind!r} does not match verb {kind!r}")
    for item in args.override or []:
        cfg.override(item)
    if args.seed is not None:
        cfg.set("experiment", "seed", args.seed)
        cfg.set("experiment", "seeds", args.seed)
    return cfg


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ugmpost", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE")

    common(sub.add_parser("train", help="train a model (vae, iwae, structured, mcmc-baseline)"))
    for verb in _VERB_KIND:
        common(sub.add_parser(verb))
    ev = sub.add_parser("eval", help="re-evaluate the checkpoints of a training run")
    ev.add_argument("run_dir", type=Path)
    ev.add_argument("--split", default="test", choices=("train", "valid", "test"))
    cmp_ = sub.add_parser("compare", help="paired comparison of two runs")
    cmp_.add_argument("dir_a", type=Path)
    cmp_.add_argument("dir_b", type=Path)
    cmp_.add_argument("--metric", default="elbo")
    cmp_.add_argument("--direction", default="max", choices=("max", "min"))
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "compare":
            result = compare_runs(args.dir_a, args.dir_b, args.metric, args.direction)
        elif args.verb == "eval":
            result = evaluate_run(args.run_dir, args.split)
        else:
            cfg = _load(args, _VERB_KIND.get(args.verb))
            if args.verb == "train" and cfg.kind not in ("vae", "iwae", "structured", "mcmc-baseline"):
                raise ConfigError(f"train does not run {cfg.kind!r} configs")
            result = run_experiment(cfg, args.out)
    except (ConfigError, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
