import json
import subprocess
import sys

import pytest

from gocpt import cli, harness
from gocpt.solve import SolverError

SMALL = ["--scenario", "factorization", "--shape", "3,3,20", "--rank", "2",
         "--prep-iters", "30"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_run_writes_steps_and_summary(tmp_path, capsys):
    out = tmp_path / "r"
    assert run("run", *SMALL, "--seed", "0,1", "--solver", "gocpt,em_als", "--out", out) == 0
    lines = (out / "steps.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2 * 18
    doc = json.loads((out / "summary.json").read_text())
    assert set(doc["solvers"]) == {"gocpt", "em_als"}
    assert doc["spec"]["seeds"] == [0, 1]


def test_variant_flag_picks_the_engine_solver(tmp_path):
    args = cli.build_parser().parse_args(["run", "--variant", "efficient"])
    assert cli.spec_from_args(args).solvers == ("gocpt_e",)
    args = cli.build_parser().parse_args(["run"])
    assert cli.spec_from_args(args).solvers == ("gocpt",)


def test_flags_override_the_config_file(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"scenario": "completion", "rank": 4, "density": 0.1,
                               "seeds": [3], "solvers": ["cpc_als"]}))
    args = cli.build_parser().parse_args(
        ["run", "--config", str(cfg), "--rank", "2", "--perturb", "none"])
    spec = cli.spec_from_args(args)
    assert spec.rank == 2 and spec.density == 0.1 and spec.seeds == (3,)
    assert spec.solvers == ("cpc_als",) and spec.perturb is None


def test_events_flag_implies_replay(tmp_path):
    assert run("generate", "--shape", "4,3,12", "--rank", "2", "--out", tmp_path) == 0
    args = cli.build_parser().parse_args(
        ["run", "--events", str(tmp_path / "events.jsonl"), "--rank", "2"])
    assert cli.spec_from_args(args).scenario == "replay"
    out = tmp_path / "r"
    assert run("run", "--events", tmp_path / "events.jsonl", "--rank", "2",
               "--prep-iters", "20", "--out", out) == 0
    assert (out / "steps.csv").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["run", "--bogus"],
    ["run", "--solver", "olstec"],
    ["run", "--rank", "two"],
    ["run", "--alpha-schedule", "linear:3"],
    ["run", "--perturb", "0.1"],
    ["run", "--config", "/nonexistent.json"],
    ["plot", "/nonexistent.csv"],
])
def test_usage_and_input_errors_exit_one(argv, capsys):
    assert run(*argv) == 1
    assert capsys.readouterr().err


def test_solver_failure_exits_two(tmp_path, monkeypatch):
    def boom(self, delta):
        raise SolverError("Cholesky failed twice (condition number 1e+18)")

    monkeypatch.setattr(harness._SolverRun, "step", boom)
    out = tmp_path / "r"
    assert run("run", *SMALL, "--out", out) == 2
    doc = json.loads((out / "summary.json").read_text())
    assert doc["failures"][0]["t"] == 1


def test_generate_twice_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("generate", "--shape", "6,5,20", "--rank", "3", "--seed", "1",
                   "--scenario", "completion", "--density", "0.02", "--out", tmp_path / d) == 0
    for name in ("truth.coo", "mask.coo", "events.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plot_and_ablate(tmp_path):
    out = tmp_path / "r"
    assert run("run", *SMALL, "--solver", "gocpt,cpc_als", "--out", out) == 0
    assert run("plot", out / "steps.csv") == 0
    assert (out / "fitness.svg").read_text().count("<polyline") == 2
    assert run("plot", out / "steps.csv", "--solver", "em_als", "--out", tmp_path / "x.svg") == 1
    assert not (tmp_path / "x.svg").exists()
    abl = tmp_path / "abl"
    assert run("ablate-density", "--shape", "6,5,4", "--rank", "2", "--density", "0.5,1.0",
               "--iters", "5", "--out", abl) == 0
    assert len((abl / "ablation.csv").read_text().splitlines()) == 5


def test_console_entry_point_runs_as_module():
    res = subprocess.run([sys.executable, "-m", "gocpt.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "ablate-density" in res.stdout
