import json
import os

import numpy as np
import pytest
import yaml

from mmsmfg import cli
from mmsmfg.config import ConfigError, parse_config, validate_config
from mmsmfg.runner import run_experiment, sha256


def write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def digests(out):
    return {f["path"]: f["sha256"] for f in json.loads((out / "manifest.json").read_text())["files"]}


class TestValidate:
    def test_minimal_riccati(self, tmp_path):
        cfg = validate_config(write(tmp_path, {"experiment": "riccati"}))
        assert cfg.model.T == 1.0 and cfg.numerics.steps == 256 and cfg.seed == 0

    def test_negative_horizon(self, tmp_path):
        with pytest.raises(ConfigError) as ei:
            validate_config(write(tmp_path, {"experiment": "riccati", "model": {"T": -1}}))
        assert any(d.startswith("model.T:") for d in ei.value.diagnostics)

    def test_asymmetric_Q(self, tmp_path):
        two = {k: (np.eye(2) * v).tolist() for k, v in
               dict(A0=0.1, B0=1, F0=0.3, S0=0.4, Q0=1, R0=1, H0=0.5, A=-0.2, B=1, F=0.2, G=0.3, S=0.5, R=1, H=0.6,
                    Hhat=0.3).items()}
        two.update(eta0=[0.2, 0.2], eta=[-0.1, -0.1], Q=[[1, 1e-3], [0, 1]])
        with pytest.raises(ConfigError) as ei:
            validate_config(write(tmp_path, {"experiment": "lqg-solve", "model": two}))
        assert ei.value.diagnostics == ["model.Q: Q must be symmetric (max asymmetry 0.001)"]

    def test_R_not_definite(self):
        with pytest.raises(ConfigError, match="model.R: R must be positive definite"):
            parse_config({"experiment": "riccati", "model": {"R": 0}})

    def test_unknown_keys(self):
        with pytest.raises(ConfigError) as ei:
            parse_config({"experiment": "riccati", "bogus": 1, "numerics": {"stepz": 3}})
        assert set(ei.value.diagnostics) == {
            "bogus: Extra inputs are not permitted",
            "numerics.stepz: Extra inputs are not permitted",
        }

    def test_unknown_check(self):
        with pytest.raises(ConfigError, match="not available"):
            parse_config({"experiment": "riccati", "checks": ["slope"]})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="file not found"):
            validate_config(tmp_path / "nope.yaml")

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("experiment: [riccati\n")
        with pytest.raises(ConfigError, match="malformed"):
            validate_config(p)

    def test_echo_roundtrip(self):
        cfg = parse_config({"experiment": "oscillator", "numerics": {"cells": 32}})
        again = parse_config(cfg.echo())
        assert again.echo() == cfg.echo()


class TestRunner:
    def test_riccati(self, tmp_path):
        rep = run_experiment(parse_config({"experiment": "riccati", "numerics": {"steps": 1000}}), tmp_path)
        assert rep.exit_code == 0
        rows = (tmp_path / "riccati.csv").read_text().splitlines()
        assert rows[0] == "t,Pi_00"
        assert float(rows[1].split(",")[1]) == pytest.approx(np.tanh(1.0), abs=1e-6)
        assert [c.name for c in rep.checks] == ["closed_form", "psd"] and all(c.passed for c in rep.checks)

    def test_general_scalar_closed_form(self, tmp_path):
        cfg = parse_config({"experiment": "riccati", "model": {"A": 0.7, "B": 1.3, "Q": 2.0, "R": 0.5, "T": 2.0}})
        rep = run_experiment(cfg, tmp_path)
        assert rep.checks[0].passed and rep.checks[0].value < 1e-8

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = parse_config({"experiment": "lqg-solve", "seed": 4, "numerics": {"steps": 20, "scenarios": 10}})
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert digests(tmp_path / "a") == digests(tmp_path / "b")
        other = cfg.model_copy(update={"seed": 5})
        run_experiment(other, tmp_path / "c")
        assert digests(tmp_path / "c")["flow_mean.csv"] != digests(tmp_path / "a")["flow_mean.csv"]

    def test_manifest_complete(self, tmp_path):
        cfg = parse_config({"experiment": "fixed-point", "numerics": {"cells": 32, "steps": 32}})
        run_experiment(cfg, tmp_path)
        listed = digests(tmp_path)
        present = {p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file()}
        assert present == set(listed)
        for path, digest in listed.items():
            if path != "manifest.json":
                assert sha256(tmp_path / path) == digest

    def test_iteration_cap(self, tmp_path):
        cfg = parse_config({"experiment": "oscillator", "numerics": {"cells": 32, "steps": 32, "max_iter": 1}})
        rep = run_experiment(cfg, tmp_path)
        assert rep.exit_code == 1
        report = json.loads((tmp_path / "report.json").read_text())
        conv = [c for c in report["checks"] if c["name"] == "converged"][0]
        assert conv["passed"] is False and report["results"]["converged"] is False

    def test_module_error_marker(self, tmp_path):
        cfg = parse_config({"experiment": "nash-check", "model": {"sigma0": 0.3}})
        rep = run_experiment(cfg, tmp_path)
        assert rep.exit_code == 2 and rep.status == "failed"
        assert (tmp_path / "FAILED").read_text().startswith("InvalidArgument")
        assert "FAILED" in digests(tmp_path)

    def test_declared_checks_only(self, tmp_path):
        cfg = parse_config({"experiment": "riccati", "checks": ["psd"]})
        assert [c.name for c in run_experiment(cfg, tmp_path).checks] == ["psd"]

    def test_gain_lqg(self, tmp_path):
        cfg = parse_config({"experiment": "gain-estimate", "gain_model": "lqg", "numerics": {"steps": 100}})
        rep = run_experiment(cfg, tmp_path)
        assert rep.exit_code == 0
        assert (tmp_path / "gain_ratios.csv").read_text().startswith("size,c0,c1")


class TestSeedPrecedence:
    def test_resolve(self):
        assert cli.resolve_seed(3, "7", 11) == 3
        assert cli.resolve_seed(None, "7", 11) == 7
        assert cli.resolve_seed(None, None, 11) == 11
        assert cli.resolve_seed(None, "", 11) == 11

    def test_end_to_end(self, tmp_path, monkeypatch):
        cfg = write(tmp_path, {"experiment": "riccati", "seed": 11})
        monkeypatch.setenv("MMFG_SEED", "7")
        assert cli.main(["riccati", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
        assert json.loads((tmp_path / "e" / "report.json").read_text())["config"]["seed"] == 7
        assert cli.main(["riccati", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "f")]) == 0
        assert json.loads((tmp_path / "f" / "report.json").read_text())["config"]["seed"] == 3
        monkeypatch.delenv("MMFG_SEED")
        assert cli.main(["riccati", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
        assert json.loads((tmp_path / "g" / "report.json").read_text())["config"]["seed"] == 11


class TestMain:
    def test_validate_ok(self, tmp_path, capsys):
        assert cli.main(["validate", "--config", str(write(tmp_path, {"experiment": "riccati"}))]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_diagnostics(self, tmp_path, capsys):
        p = write(tmp_path, {"experiment": "riccati", "model": {"T": 0}})
        assert cli.main(["validate", "--config", str(p)]) == 2
        assert "model.T" in capsys.readouterr().err

    def test_kind_mismatch(self, tmp_path):
        p = write(tmp_path, {"experiment": "riccati"})
        assert cli.main(["oscillator", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_threads(self, tmp_path, monkeypatch):
        for var in cli.THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        assert cli.main(["riccati", "--threads", "2", "--out", str(tmp_path)]) == 0
        assert all(os.environ[v] == "2" for v in cli.THREAD_VARS)

    def test_bad_seed(self):
        with pytest.raises(SystemExit) as ei:
            cli.main(["riccati", "--seed", "-4"])
        assert ei.value.code == 2
