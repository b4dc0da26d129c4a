import argparse
import csv
import json

import pytest

from starmot import cli


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    code = cli.main(["generate", "--seed", "4", "--n-agents", "6", "--n-frames", "6", "--out", str(out)])
    assert code == 0
    return out / "scenario.jsonl"


def test_generate_and_validate(scenario):
    assert scenario.exists()
    assert cli.main(["scenario", "validate", str(scenario)]) == 0
    assert cli.main(["scenario", "validate", "--scenario", str(scenario)]) == 0


def test_validate_rejects_broken_file(tmp_path, scenario):
    lines = scenario.read_text().splitlines()
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join(lines[:-2]) + "\n")
    assert cli.main(["scenario", "validate", str(broken)]) == 3


def test_run_then_eval(tmp_path, scenario):
    out = tmp_path / "run"
    assert cli.main(["run", "--scenario", str(scenario), "--dump-residuals", "--out", str(out)]) == 0
    rec = json.loads((out / "run_record.json").read_text())
    assert len(rec["frames"]) == 6
    with open(out / "residuals.csv") as fh:
        assert next(csv.reader(fh)) == ["frame", "iteration", "stage", "total_cost"]
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--scenario", str(scenario), "--run", str(out / "run_record.json"),
                     "--out", str(ev)]) == 0
    mot = json.loads((ev / "mot.json").read_text())
    assert mot["mota"] == 100.0
    assert (ev / "trajectory_per_frame.csv").exists()


def test_sweep(tmp_path):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--n-agents", "4", "--n-frames", "4", "--seeds", "2", "--sigmas", "0,0.4",
                     "--variants", "full,spatial", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"full", "spatial"} and set(summary["full"]) == {"0.0", "0.4"}
    with open(out / "sweep.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 8


@pytest.mark.parametrize("argv", [
    ["run", "--scenario", "x", "--tau", "abc"],
    ["run", "--scenario", "x", "--lambda", "0.5,0.5"],
    ["run", "--scenario", "x", "--ablate", "colour"],
    ["run"],
    ["run", "--scenario", "/nonexistent/file.jsonl"],
    ["generate", "--family", "sparse"],
    ["generate", "--n-agents", "-3"],
    ["bogus-command"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)] if argv[0] in ("run", "generate") else argv) == 2


def test_invalid_weights_are_config_errors(scenario, tmp_path):
    assert cli.main(["run", "--scenario", str(scenario), "--lambda", "1,1,1", "--out", str(tmp_path)]) == 2


def test_runtime_failure_exit_3(tmp_path, scenario):
    rec = tmp_path / "rec.json"
    rec.write_text("{}")
    assert cli.main(["eval", "--scenario", str(scenario), "--run", str(rec), "--out", str(tmp_path)]) == 3


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "starmot.cfg"
    cfg.write_text("# tracker settings\ntau = 0.7\nwindow-w = 6\nL = 4.0  # metres\nablate = shape\n")
    args = cli.build_parser().parse_args(["run", "--config", str(cfg), "--tau", "0.6"])
    opts = cli.resolve(args)
    assert opts["tau"] == 0.6 and opts["window_w"] == 6 and opts["L"] == 4.0
    rc = cli.run_config(opts)
    assert rc.tau == 0.6 and rc.ablate == ("shape",)


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("speed = 3\n")
    assert cli.main(["run", "--config", str(cfg), "--scenario", "x", "--out", str(tmp_path)]) == 2


def test_every_flag_has_a_config_key():
    p = cli.build_parser()
    sub = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub.choices.items():
        for a in sp._actions:
            if a.dest in ("help", "config", "command", "scenario_path", "scenario_command"):
                continue
            assert a.dest in cli._OPTIONS, (name, a.dest)
