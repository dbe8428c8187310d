import json

import numpy as np
import pytest

from ugmpost.experiments import (KINDS, ConfigError, ExperimentConfig, compare_runs,
                                 grad_study_discrete, run_experiment)
from ugmpost.cli import CONFIG_DIR, main


def write_metrics(path, rows, header=("epoch", "elbo", "nll_bound", "logz_theta", "wall_ms")):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


class TestConfig:
    def test_defaults_exist_for_every_kind(self):
        shipped = {ExperimentConfig.from_file(p).kind for p in CONFIG_DIR.glob("*.ini")}
        assert shipped == set(KINDS)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ExperimentConfig("[experiment]\nkind = bogus\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(tmp_path / "none.ini")

    def test_override_and_types(self):
        cfg = ExperimentConfig("[experiment]\nkind = vae\n")
        cfg.override("train.lr=0.01")
        cfg.override("model.enc_hidden = 7,5")
        tc = cfg.train_config()
        assert tc.lr == 0.01 and tc.enc_hidden == (7, 5) and tc.objective == "elbo"
        with pytest.raises(ConfigError):
            cfg.override("nodot=1")

    def test_hash_is_canonical(self):
        a = ExperimentConfig("[experiment]\nkind = vae\nseed = 1\n[train]\nlr = 0.1\nepochs = 2\n")
        b = ExperimentConfig("[train]\nepochs = 2\nlr = 0.1\n[experiment]\nseed = 1\nkind = vae\n")
        assert a.text() == b.text() and a.content_hash() == b.content_hash()
        b.override("train.lr=0.2")
        assert a.content_hash() != b.content_hash()

    def test_git_blob_hash(self):
        import hashlib
        cfg = ExperimentConfig("[experiment]\nkind = vae\n")
        body = cfg.text().encode()
        assert cfg.content_hash() == hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


class TestRuns:
    def test_toy_gaussian_deterministic(self, tmp_path):
        text = ("[experiment]\nkind = toy-gaussian\nseeds = 0\n[toy]\niterations = 30\n"
                "record_every = 10\nts = 1,2\nprobe_trials = 5\n")
        s1 = run_experiment(ExperimentConfig(text), tmp_path / "a")
        s2 = run_experiment(ExperimentConfig(text), tmp_path / "b")
        for name in ("kl_curves.csv", "grad_l2.csv", "summary.json", "config.ini"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert set(s1["results"]["final_kl"]) == {"reinforce", "reparam", "term2-t1", "term2-t2", "term12-t1"}
        assert s1 == s2

    def test_training_run_layout(self, tmp_path):
        text = ("[experiment]\nkind = vae\nseeds = 0,1\n[data]\nsource = synthetic-bars-stripes\n"
                "[model]\nn1 = 2\nn2 = 2\nenc_hidden = 4\ndec_hidden = 4\n"
                "[train]\nepochs = 1\nbatch_size = 10\nprior_temps = 4\nprior_population = 10\n")
        s = run_experiment(ExperimentConfig(text), tmp_path)
        for seed in (0, 1):
            assert (tmp_path / f"seed{seed}" / "checkpoint.bin").exists()
        assert s["results"]["elbo"]["n"] == 2
        assert json.loads((tmp_path / "summary.json").read_text())["config_hash"] == s["config_hash"]

    def test_errors_carry_context(self, tmp_path):
        cfg = ExperimentConfig("[experiment]\nkind = vae\n[data]\nsource = mnist-idx\nroot = /nonexistent\n")
        with pytest.raises(RuntimeError, match="vae experiment failed"):
            run_experiment(cfg, tmp_path)

    def test_grad_study_discrete_small(self):
        r = grad_study_discrete(0, 2000, chunk=1000)
        assert len(r["exact"]) == len(r["estimate"]) and r["relative_l2"] > 0


class TestCompare:
    def test_identical(self, tmp_path):
        for s in (0, 1, 2):
            write_metrics(tmp_path / "a" / f"seed{s}" / "metrics.csv", [(1, -10.0 - s, 9.0, 1.0, 5.0)])
        r = compare_runs(tmp_path / "a", tmp_path / "a", "elbo")
        assert r["delta"]["mean"] == 0.0 and r["verdict"] == "tie"

    def test_signed_gap(self, tmp_path):
        for s in (0, 1, 2):
            write_metrics(tmp_path / "a" / f"seed{s}" / "metrics.csv", [(1, -10.0 + 0.01 * s, 9, 1, 5)])
            write_metrics(tmp_path / "b" / f"seed{s}" / "metrics.csv", [(1, -11.0 - 0.01 * s, 9, 1, 5)])
        r = compare_runs(tmp_path / "a", tmp_path / "b", "elbo", "max")
        assert r["delta"]["mean"] == pytest.approx(1.02) and r["verdict"] == "a"
        r = compare_runs(tmp_path / "a", tmp_path / "b", "elbo", "min")
        assert r["verdict"] == "b"

    def test_missing_metric(self, tmp_path):
        write_metrics(tmp_path / "a" / "metrics.csv", [(1, 1, 1, 1, 1)])
        with pytest.raises(KeyError):
            compare_runs(tmp_path / "a", tmp_path / "a", "accuracy")

    def test_schema_mismatch(self, tmp_path):
        write_metrics(tmp_path / "a" / "metrics.csv", [(1, 1, 1, 1, 1)])
        write_metrics(tmp_path / "b" / "metrics.csv", [(1, 1)], header=("epoch", "elbo"))
        with pytest.raises(ValueError, match="schema"):
            compare_runs(tmp_path / "a", tmp_path / "b", "elbo")

    def test_no_metrics(self, tmp_path):
        (tmp_path / "a").mkdir()
        with pytest.raises(FileNotFoundError):
            compare_runs(tmp_path / "a", tmp_path / "a", "elbo")


class TestCli:
    def test_logz_study_verb(self, tmp_path, capsys):
        rc = main(["logz-study", "--out", str(tmp_path), "--override", "logz.repeats=2",
                   "--override", "logz.temp_counts=4,8", "--override", "logz.population=16"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["kind"] == "logz-study"
        assert (tmp_path / "logz_bias.csv").exists()

    def test_seed_flag(self, tmp_path, capsys):
        main(["toy-gaussian", "--seed", "5", "--out", str(tmp_path), "--override", "toy.iterations=5",
              "--override", "toy.record_every=5", "--override", "toy.ts=1", "--override", "toy.probe_trials=2"])
        assert json.loads(capsys.readouterr().out)["seed"] == 5

    def test_compare_verb(self, tmp_path, capsys):
        write_metrics(tmp_path / "a" / "metrics.csv", [(1, -1.0, 1, 1, 1)])
        assert main(["compare", str(tmp_path / "a"), str(tmp_path / "a")]) == 0
        assert json.loads(capsys.readouterr().out)["delta"]["mean"] == 0.0

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        assert main(["train"]) == 2
        assert main(["compare", str(tmp_path), str(tmp_path)]) == 2
        assert main(["modes", "--config", str(CONFIG_DIR / "vae.ini")]) == 2
        assert "error" in capsys.readouterr().err

    def test_eval_verb(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[experiment]\nkind = vae\nseeds = 0\n[data]\nsource = synthetic-bars-stripes\n"
                       "[model]\nn1 = 2\nn2 = 2\nenc_hidden = 4\ndec_hidden = 4\n"
                       "[train]\nepochs = 1\nbatch_size = 10\nprior_temps = 4\nprior_population = 10\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        capsys.readouterr()
        assert main(["eval", str(tmp_path / "run"), "--split", "train"]) == 0
        assert np.isfinite(json.loads(capsys.readouterr().out)["0"]["nll_bound"])
