import json
import subprocess
import sys

import numpy as np
import pytest

from lope.cli import main
from lope.harness import SweepConfig, run_evaluation_sweep

SMALL = {"n_users": 40, "n_actions": 4, "seed": 2}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "env.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def sample_dir(tmp_path, small_config):
    out = tmp_path / "sample"
    assert main(["envs", "sample", "--config", str(small_config), "--n", "150", "--out", str(out)]) == 0
    return out


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["sweep", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_subcommand(self):
        assert main([]) == 1

    def test_bad_grid(self):
        assert main(["sweep", "--param", "n", "--grid", "1,x"]) == 1

    def test_missing_file(self, tmp_path):
        assert main(["estimate", "--estimator", "ips", "--data", str(tmp_path / "none.csv"),
                     "--policy", str(tmp_path / "none.json")]) == 1

    def test_empty_dataset(self, tmp_path, sample_dir, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("user_index,action,propensity,s_0,s_1,s_2,r\n")
        code = main(["estimate", "--estimator", "dr", "--data", str(empty), "--policy", str(sample_dir / "pi1.json")])
        assert code == 1
        assert "dataset is empty" in capsys.readouterr().err

    def test_help(self):
        assert main(["--help"]) == 0


class TestOracleCheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["oracle-check", "--seed", "7", "--out", str(tmp_path)]) == 0
        assert "max identity gap" in capsys.readouterr().out
        report = json.loads((tmp_path / "oracle_check.json").read_text())
        assert report["passed"]
        m = _manifest(tmp_path)
        assert m["command"] == "oracle-check" and m["seed"] == 7
        assert set(m) == {"command", "config", "seed", "version", "started_at", "outputs"}


class TestEstimate:
    @pytest.mark.parametrize("estimator", ["ips", "dr", "lope"])
    def test_estimators(self, sample_dir, tmp_path, estimator, capsys):
        out = tmp_path / estimator
        argv = ["estimate", "--estimator", estimator, "--data", str(sample_dir / "dh.csv"),
                "--policy", str(sample_dir / "pi1.json"), "--contexts", str(sample_dir / "contexts.csv"),
                "--logging", str(sample_dir / "pi0.json"), "--out", str(out)]
        assert main(argv) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["estimator_name"] == estimator and np.isfinite(printed["value"])
        assert json.loads((out / "estimate.json").read_text()) == printed

    def test_lope_needs_logging(self, sample_dir):
        argv = ["estimate", "--estimator", "lope", "--data", str(sample_dir / "dh.csv"),
                "--policy", str(sample_dir / "pi1.json")]
        assert main(argv) == 1

    def test_policy_needs_probs(self, sample_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"name": "x"}')
        assert main(["estimate", "--estimator", "ips", "--data", str(sample_dir / "dh.csv"), "--policy", str(bad)]) == 1


class TestSweepAndReport:
    def test_sweep_outputs_and_manifest_reproducibility(self, tmp_path, small_config):
        out = tmp_path / "sweep"
        argv = ["sweep", "--param", "n", "--grid", "60,90", "--config", str(small_config),
                "--replications", "2", "--out", str(out)]
        assert main(argv) == 0
        for name in ("sweep.csv", "mse.svg", "bias2.svg", "var.svg", "manifest.json"):
            assert (out / name).exists()
        cfg = SweepConfig.from_dict(_manifest(out)["config"])
        again = tmp_path / "again.csv"
        run_evaluation_sweep(cfg).to_csv(again)
        assert again.read_bytes() == (out / "sweep.csv").read_bytes()

        rep = tmp_path / "report"
        assert main(["report", "--csv", str(out / "sweep.csv"), "--param", "n", "--out", str(rep)]) == 0
        assert main(["report", "--csv", str(out / "sweep.csv"), "--param", "n", "--out", str(tmp_path / "report2")]) == 0
        for metric in ("mse", "bias2", "var"):
            assert (rep / f"{metric}.svg").read_bytes() == (tmp_path / "report2" / f"{metric}.svg").read_bytes()
        # the sweep's own charts are rendered by the same pure function
        assert (rep / "mse.svg").read_bytes() == (out / "mse.svg").read_bytes()

    def test_select(self, tmp_path, small_config, capsys):
        out = tmp_path / "select"
        argv = ["select", "--param", "sigma_r", "--grid", "9", "--config", str(small_config),
                "--replications", "2", "--estimators", "ips,lope", "--no-skyline", "--out", str(out)]
        assert main(argv) == 0
        lines = (out / "selection.csv").read_text().splitlines()
        assert lines[0] == "estimator,param,accuracy,R" and len(lines) == 3

    def test_bad_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert main(["report", "--csv", str(bad), "--out", str(tmp_path / "r")]) == 1


class TestLearnAndOpl:
    def test_learn(self, tmp_path, sample_dir):
        cfg = tmp_path / "learner.json"
        cfg.write_text(json.dumps({"gradient_estimator": "lope_pg", "epochs": 3}))
        out = tmp_path / "learn"
        argv = ["learn", "--data", str(sample_dir / "dh.csv"), "--config", str(cfg),
                "--logging", str(sample_dir / "pi0.json"), "--contexts", str(sample_dir / "contexts.csv"), "--out", str(out)]
        assert main(argv) == 0
        policy = json.loads((out / "policy.json").read_text())
        assert policy["parameterization"] == "linear"
        assert len((out / "value_trace.csv").read_text().splitlines()) == 5

    def test_opl(self, tmp_path):
        cfg = tmp_path / "opl.json"
        cfg.write_text(json.dumps({"env": SMALL, "learner": {"epochs": 2}}))
        out = tmp_path / "opl"
        argv = ["opl", "--grid", "80", "--config", str(cfg), "--replications", "2", "--out", str(out)]
        assert main(argv) == 0
        lines = (out / "opl.csv").read_text().splitlines()
        assert len(lines) == 5


class TestEnvs:
    def test_dump(self, tmp_path, small_config):
        out = tmp_path / "dump"
        assert main(["envs", "dump", "--config", str(small_config), "--out", str(out)]) == 0
        assert (out / "theta_g.csv").exists()


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lope.cli", "oracle-check", "--n-envs", "2"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "max identity gap" in proc.stdout
