import json
import subprocess
import sys

import numpy as np
import pytest

from hemm import cli
from hemm.data import load_dataset, save_dataset
from hemm.errors import NumericalError

FAST = {"synthetic": {"n": 200}, "train": {"max_epochs": 2, "pretrain_epochs": 1, "step_size": 0.01}}


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.json"
    path.write_text(json.dumps(FAST))
    return str(path)


def _run(*argv):
    return cli.run([str(a) for a in argv])


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestSimulate:
    def test_thousand_rows(self, tmp_path):
        assert _run("simulate", "--out", tmp_path / "sim") == 0
        data = load_dataset(tmp_path / "sim" / "dataset.csv")
        assert data.n == 1000 and data.has_potential_outcomes
        assert json.loads((tmp_path / "sim" / "config.json").read_text())["command"] == "simulate"

    def test_seed_changes_data(self, tmp_path):
        _run("simulate", "--out", tmp_path / "a", "--seed", 1)
        _run("simulate", "--out", tmp_path / "b", "--seed", 2)
        assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "b" / "dataset.csv").read_bytes()


class TestTrain:
    def test_outputs_and_determinism(self, tmp_path, fast_config):
        for name in ("a", "b"):
            assert _run("train", "--config", fast_config, "--out", tmp_path / name, "--seed", 3) == 0
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert set(a) >= {"model.ckpt", "trace.csv", "metrics.json", "transform.json", "config.json"}
        assert a == b

    def test_snapshot_rerun_is_identical(self, tmp_path, fast_config):
        _run("train", "--config", fast_config, "--out", tmp_path / "a", "--k", 3, "--heads", "mlp1")
        assert _run("train", "--config", tmp_path / "a" / "config.json", "--out", tmp_path / "b") == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")

    def test_flags_override_file(self, tmp_path, fast_config):
        _run("train", "--config", fast_config, "--out", tmp_path / "a", "--k", 3, "--lambda", 0.1,
             "--prior", "group")
        cfg = json.loads((tmp_path / "a" / "config.json").read_text())
        assert cfg["train"]["K"] == 3 and cfg["train"]["lam"] == 0.1
        assert cfg["train"]["prior_kind"] == "group_l12"
        assert cfg["train"]["max_epochs"] == 2

    def test_em_trainer(self, tmp_path, fast_config):
        assert _run("train", "--config", fast_config, "--out", tmp_path / "a", "--trainer", "em") == 0


class TestEvaluate:
    def test_metrics_on_synthetic(self, tmp_path, fast_config):
        _run("train", "--config", fast_config, "--out", tmp_path / "m")
        assert _run("evaluate", "--config", fast_config, "--model", tmp_path / "m", "--out", tmp_path / "e") == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert metrics["sqrt_pehe"] is not None and 0 <= metrics["subgroup_auc"] <= 1
        assert (tmp_path / "e" / "curve.csv").read_text().startswith("threshold,fraction,tau_hat")
        assert (tmp_path / "e" / "roc.csv").read_text().startswith("fpr,tpr")

    def test_missing_potential_outcomes_notice(self, tmp_path, fast_config, capsys):
        _run("simulate", "--out", tmp_path / "sim")
        data = load_dataset(tmp_path / "sim" / "dataset.csv")
        factual = type(data)(data.x_cont, data.x_disc, data.t, data.y)
        save_dataset(factual, tmp_path / "factual.csv")
        _run("train", "--config", fast_config, "--data", tmp_path / "factual.csv", "--out", tmp_path / "m")
        code = _run("evaluate", "--data", tmp_path / "factual.csv", "--model", tmp_path / "m",
                    "--out", tmp_path / "e")
        assert code == 0
        assert "PEHE skipped" in capsys.readouterr().err
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert metrics["pehe"] is None and metrics["notices"]

    def test_requires_model(self, tmp_path):
        assert _run("evaluate", "--out", tmp_path / "e") == cli.EXIT_CONFIG


class TestOtherCommands:
    def test_gridsearch_leaderboard(self, tmp_path, fast_config):
        cfg = dict(FAST, grid={"Ks": [1, 2], "lams": [0.0], "restarts": 2, "head_modes": ["separate"]})
        path = tmp_path / "grid.json"
        path.write_text(json.dumps(cfg))
        assert _run("gridsearch", "--config", path, "--out", tmp_path / "g") == 0
        rows = (tmp_path / "g" / "leaderboard.csv").read_text().splitlines()
        assert rows[0].startswith("rank,K,lambda") and len(rows) == 5
        assert len(list((tmp_path / "g" / "checkpoints").iterdir())) == 4

    @pytest.mark.parametrize("name", ["linear1", "linear2", "knn", "vt"])
    def test_baselines(self, tmp_path, fast_config, name):
        assert _run("baseline", "--config", fast_config, "--name", name, "--out", tmp_path / "b") == 0
        metrics = json.loads((tmp_path / "b" / "metrics.json").read_text())
        assert metrics["baseline"] == name and metrics["sqrt_pehe"] >= 0
        assert (tmp_path / "b" / "rules.txt").exists() == (name == "vt")

    def test_report(self, tmp_path, fast_config):
        _run("train", "--config", fast_config, "--out", tmp_path / "m")
        assert _run("report", "--config", fast_config, "--model", tmp_path / "m", "--out", tmp_path / "r") == 0
        text = (tmp_path / "r" / "report.txt").read_text()
        assert "(enhanced)" in text and "(no binary covariates)" in text

    def test_compare_em(self, tmp_path, fast_config):
        assert _run("compare-em", "--config", fast_config, "--out", tmp_path / "c") == 0
        a = (tmp_path / "c" / "trace_elbo.csv").read_text().splitlines()
        b = (tmp_path / "c" / "trace_em.csv").read_text().splitlines()
        assert a[0] == b[0]
        assert set(json.loads((tmp_path / "c" / "summary.json").read_text())) == {"elbo", "em"}


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"K": 2, "learning_rate": 1.0}}))
        assert _run("train", "--config", path, "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_bad_flag_value(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            _run("train", "--out", tmp_path / "o", "--k", "two")
        assert info.value.code == cli.EXIT_CONFIG

    def test_non_empty_output_dir(self, tmp_path):
        (tmp_path / "o").mkdir()
        (tmp_path / "o" / "x").write_text("keep")
        assert _run("simulate", "--out", tmp_path / "o") == cli.EXIT_CONFIG
        assert (tmp_path / "o" / "x").read_text() == "keep"

    def test_malformed_data(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("cont:a,t,y\n0.1,0,1\n0.2,3,1\n")
        assert _run("train", "--data", bad, "--out", tmp_path / "o") == cli.EXIT_DATA
        assert not (tmp_path / "o").exists()

    def test_numerical_failure_writes_diagnostics(self, tmp_path, monkeypatch):
        def boom(cfg, out):
            raise NumericalError("non-finite gradient", block="mixture.mu")

        monkeypatch.setitem(cli.HANDLERS, "train", boom)
        assert _run("train", "--out", tmp_path / "o") == cli.EXIT_NUMERICAL
        diag = json.loads((tmp_path / "o" / "diagnostics.json").read_text())
        assert diag["block"] == "mixture.mu" and diag["error"] == "NumericalError"

    def test_console_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "hemm.cli", "simulate", "--out", str(tmp_path / "s"),
                               "--config", "/nonexistent.json"], capture_output=True, text=True)
        assert proc.returncode == cli.EXIT_CONFIG
        assert "config error" in proc.stderr
