import json

import pytest
from hypothesis import given, strategies as st

from rsmp import cli
from rsmp.cli import ConfigError, ExperimentConfig, main, validate_config
from rsmp.model import ModelEvaluationError

SMALL = ["--N", "300", "--M", "16", "--seed", "4"]
LADDER = ["--eps", "0.25,0.125,0.0625"]


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


configs = st.builds(
    ExperimentConfig,
    benchmark=st.sampled_from(["example", "quadratic", "linear"]),
    N=st.integers(1, 10**6),
    M=st.integers(1, 4096),
    seed=st.integers(0, 2**63),
    eps_ladder=st.lists(st.floats(1e-4, 1.0), min_size=3, max_size=6),
    spike_u=st.none() | st.lists(st.floats(-1, 1), min_size=1, max_size=1),
    tol=st.floats(1e-12, 1.0),
    keep_cells=st.booleans(),
    export_format=st.sampled_from(["csv", "bin", "both"]),
)


class TestConfig:
    @given(configs)
    def test_json_round_trip(self, cfg):
        assert ExperimentConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"N": 10, "paths": 5})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json("[1, 2]")

    @pytest.mark.parametrize("change", [
        {"N": 0}, {"M": -3}, {"benchmark": "nope"}, {"eps_ladder": [0.25, 0.5, 0.125]},
        {"eps_ladder": [0.1, 0.05, 0.025]}, {"spike_s": 0.9}, {"spike_u": [0.5]}, {"ridge": 2.0},
        {"export_format": "xml"}, {"constraint_sign": 0.5}, {"degree": -1},
    ])
    def test_invalid(self, change):
        cfg = ExperimentConfig(**{"M": 16, **change})
        with pytest.raises(ConfigError):
            validate_config(cfg, "verify-orders")

    def test_constrained_needs_constraint(self):
        with pytest.raises(ConfigError):
            validate_config(ExperimentConfig(), "check-constrained")
        validate_config(ExperimentConfig(benchmark="example_vacuous"), "check-constrained")


class TestExitCodes:
    def test_invalid_config_writes_nothing(self, tmp_path):
        out = tmp_path / "out"
        assert main(["verify-orders", "--M", "16", "--eps", "0.1,0.05,0.025", "--out", str(out)]) == 2
        assert not out.exists()

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(ExperimentConfig(N=200, M=16, benchmark="example").to_json())
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["config"]["N"] == 200
        bad = tmp_path / "bad.json"
        bad.write_text('{"N": 10, "colour": 1}')
        assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "p")]) == 2

    def test_example_mp_passes(self, tmp_path):
        assert main(["check-mp", *SMALL, "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "mp_report.json").read_text())
        assert rep["violated"] is False

    def test_box_mp_fails(self, tmp_path):
        assert main(["check-mp", "--benchmark", "example_box", *SMALL, "--out", str(tmp_path)]) == 1
        bad = json.loads((tmp_path / "mp_report.json").read_text())["violating_controls"]
        assert bad and all(0 < u[0] < 0.5 for u in bad)

    def test_small_study_warns(self, tmp_path, capsys):
        assert main(["verify-orders", "--N", "10", "--M", "16", *LADDER, "--out", str(tmp_path)]) == 0
        assert "inconclusive" in capsys.readouterr().err

    def test_fault_injection(self, tmp_path):
        args = ["verify-orders", "--N", "2000", "--M", "16", *LADDER, "--out", str(tmp_path)]
        assert main(args) == 0
        assert main([*args, "--flip-delta-sigma"]) == 1

    def test_numerical_failure(self, tmp_path, monkeypatch):
        seen = {}

        def boom(cfg, out):
            seen["status"] = json.loads((out / "manifest.json").read_text())["status"]
            raise ModelEvaluationError("f is not finite at t=0")

        monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
        assert main(["simulate", *SMALL, "--out", str(tmp_path)]) == 3
        assert seen["status"] == "running"
        assert json.loads((tmp_path / "manifest.json").read_text())["status"].startswith("error")

    def test_list_benchmarks(self, capsys):
        assert main(["list-benchmarks"]) == 0
        assert "quadratic" in capsys.readouterr().out


class TestOutputs:
    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["validate-model", "--benchmark", "quadratic"]) == 0
        assert (tmp_path / "env" / "validation.json").exists()

    def test_simulate_exports(self, tmp_path):
        assert main(["simulate", *SMALL, "--format", "both", "--out", str(tmp_path)]) == 0
        names = set(_files(tmp_path))
        for label in ("x", "y", "z", "p", "q", "P", "Q"):
            assert {f"{label}.csv", f"{label}.bin"} <= names
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "complete" and "summary.json" in manifest["outputs"]

    def test_constrained_outputs(self, tmp_path):
        assert main(["check-constrained", "--benchmark", "example_costlevel", *SMALL, "--circle-points", "8",
                     "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "circle_scan.csv").read_text().splitlines()
        assert rows[0] == "index,lambda,mu,worst_mean" and len(rows) == 9

    @pytest.mark.parametrize("command", ["simulate", "check-mp", "verify-orders"])
    def test_byte_identical_reruns(self, tmp_path, monkeypatch, command):
        extra = LADDER if command == "verify-orders" else []
        for name in ("a", "b"):
            monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / name))
            main([command, *SMALL, *extra])
        assert _files(tmp_path / "a") == _files(tmp_path / "b")

    def test_workers_do_not_change_results(self, tmp_path, monkeypatch):
        for name, w in (("a", "1"), ("b", "2")):
            monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / name))
            main(["verify-orders", *SMALL, *LADDER, "--workers", w])
        a = json.loads((tmp_path / "a" / "order_report.json").read_text())
        b = json.loads((tmp_path / "b" / "order_report.json").read_text())
        a["config"].pop("workers"), b["config"].pop("workers")
        assert a == b
        assert (tmp_path / "a" / "order_report.csv").read_bytes() == (tmp_path / "b" / "order_report.csv").read_bytes()
