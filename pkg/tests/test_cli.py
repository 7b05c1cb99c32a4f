import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from lipbnb.bnb import BnbStatus, Rectangle
from lipbnb.cli import (
    EXIT_COUNTEREXAMPLE,
    EXIT_NODE_CAP,
    EXIT_OK,
    EXIT_USAGE,
    RECORD_SCHEMA,
    STATUS_EXIT,
    SUMMARY_SCHEMA,
    run,
)
from lipbnb.network import forward, load_network
from lipbnb.problems import DATA_DIR, load_problem
from lipbnb.reach import RotatedRectangle, simulate

DI = str(DATA_DIR / "double_integrator.problem.json")
ARM = str(DATA_DIR / "robotic_arm.problem.json")
TOY_POS = str(DATA_DIR / "toy_positive.problem.json")
TOY_NEG = str(DATA_DIR / "toy_crossing.problem.json")


def read_out(path):
    records = [json.loads(line) for line in (path / "records.jsonl").read_text().splitlines()]
    summary = json.loads((path / "summary.json").read_text())
    for rec in records:
        jsonschema.validate(rec, RECORD_SCHEMA)
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    return records, summary


def test_verify_positive_toy(tmp_path):
    assert run(["verify", TOY_POS, "--out", str(tmp_path)]) == EXIT_OK
    records, summary = read_out(tmp_path)
    assert summary["status"] == "VerifiedNonnegative"
    assert summary["BLB"] >= 0
    assert records[0]["result"]["status"] == "VerifiedNonnegative"


def test_verify_crossing_toy_reports_witness(tmp_path):
    assert run(["verify", TOY_NEG, "--out", str(tmp_path)]) == EXIT_COUNTEREXAMPLE
    _, summary = read_out(tmp_path)
    assert summary["status"] == "CounterexampleFound"
    net = load_network(DATA_DIR / "toy_crossing.json")
    w = np.array(summary["witness"])
    assert np.all((w >= 0) & (w <= 1))
    assert forward(net, w)[0] < 0


def test_verify_from_flags(tmp_path, capsys):
    code = run(["verify", "--weights", str(DATA_DIR / "toy_positive.json"),
                "--lower=0,0", "--upper=1,1", "--epsilon", "0.001"])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "Converged"
    assert summary["BUB"] - summary["BLB"] <= 0.001
    assert summary["BLB"] <= 2.0 <= summary["BUB"]


def test_reach_double_integrator(tmp_path):
    svg = tmp_path / "di.svg"
    assert run(["reach", DI, "--epsilon", "0.01", "--out", str(tmp_path), "--svg", str(svg), "--threads", "1"]) == EXIT_OK
    records, summary = read_out(tmp_path)
    sets = [r for r in records if r["type"] == "set"]
    solves = [r for r in records if r["type"] == "solve"]
    assert len(sets) == 6 and [r["step"] for r in sets] == list(range(6))
    assert len(sets[1:]) == 5
    assert len(solves) == 20 and summary["num_solves"] == 20
    assert all(r["bnb"]["BUB"] - r["bnb"]["BLB"] <= 0.01 for r in solves)
    assert summary["goal_avoid"]["goal_reached"]
    assert svg.read_text().startswith("<svg")
    lines = (tmp_path / "trajectories.csv").read_text().splitlines()
    assert lines[0] == "sample,step,x0,x1" and len(lines) == 1 + 100 * 6


def test_reach_records_describe_sound_sets(tmp_path):
    assert run(["reach", DI, "--out", str(tmp_path)]) == EXIT_OK
    records, _ = read_out(tmp_path)
    pb = load_problem(DI)
    fresh = simulate(pb.dynamics, pb.network, pb.initial_set, 2000, seed=55)
    for r in records:
        if r["type"] == "set":
            s = RotatedRectangle(np.array(r["rotation"]), Rectangle(r["lower"], r["upper"]))
            assert s.contains(fresh[:, r["step"]], 1e-9).all()


def test_reach_open_loop(tmp_path):
    assert run(["reach", ARM, "--out", str(tmp_path), "--samples", "2000", "--svg", str(tmp_path / "a.svg")]) == EXIT_OK
    records, summary = read_out(tmp_path)
    assert len(records) == 60 and all(r["type"] == "facet" for r in records)
    assert summary["samples_inside"]


def test_lipschitz_command(capsys):
    assert run(["lipschitz", DI]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["certificate"]["bound"] > 0
    assert run(["lipschitz", "--weights", str(DATA_DIR / "robotic_arm.json"), "--direction=1,-1",
                "--lipschitz-method", "naive"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["certificate"]["method"] == "naive"


def test_node_cap_exit_code(tmp_path):
    code = run(["verify", "--weights", str(DATA_DIR / "robotic_arm.json"), "--direction=1,0",
                "--lower=1,1", "--upper=2,2", "--epsilon", "1e-9", "--node-cap", "20", "--out", str(tmp_path)])
    assert code == EXIT_NODE_CAP
    _, summary = read_out(tmp_path)
    assert summary["status"] == "NodeCapReached"


def test_missing_weight_file_leaves_no_output(tmp_path, capsys):
    out = tmp_path / "out"
    code = run(["verify", "--weights", str(tmp_path / "nope.json"), "--lower=0,0", "--upper=1,1", "--out", str(out)])
    assert code == EXIT_USAGE
    assert not out.exists()
    captured = capsys.readouterr()
    assert captured.out == "" and "error" in captured.err


def test_problem_with_missing_network_is_usage_error(tmp_path):
    doc = json.loads((DATA_DIR / "toy_positive.problem.json").read_text())
    doc["network"] = "absent.json"
    pfile = tmp_path / "p.json"
    pfile.write_text(json.dumps(doc))
    assert run(["verify", str(pfile), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["reach"],
    ["reach", DI, "--kv", "3"],
    ["reach", DI, "--epsilon", "-1"],
    ["reach", DI, "--axes", "0,0"],
    ["reach", DI, "--axes", "0,5", "--svg", "x.svg"],
    ["reach", DI, "--samples", "2"],
    ["verify", "--weights", str(DATA_DIR / "toy_positive.json"), "--lower=0,0"],
    ["verify", DI],
    ["bench", "run", "nonexistent"],
    ["reach", TOY_POS],
])
def test_usage_errors(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == EXIT_USAGE
    assert capsys.readouterr().out == ""
    assert not (tmp_path / "x.svg").exists()


def test_exit_codes_are_total_and_distinct():
    assert set(STATUS_EXIT) == set(BnbStatus)
    assert STATUS_EXIT[BnbStatus.CONVERGED] == STATUS_EXIT[BnbStatus.VERIFIED] == EXIT_OK
    assert len({EXIT_OK, EXIT_USAGE, EXIT_COUNTEREXAMPLE, EXIT_NODE_CAP}) == 4


def test_svg_is_byte_stable(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["verify", TOY_NEG, "--out", str(d), "--svg", str(d / "p.svg")]) == EXIT_COUNTEREXAMPLE
    assert (a / "p.svg").read_bytes() == (b / "p.svg").read_bytes()
    assert (a / "records.jsonl").read_text().count("\n") == 1


def test_bench_double_integrator(tmp_path):
    assert run(["bench", "run", "double_integrator", "--epsilon", "0.01", "--out", str(tmp_path)]) == EXIT_OK
    records, summary = read_out(tmp_path)
    assert {r["name"] for r in records} >= {"solve_count", "gap_contract", "containment", "refinement_branches"}
    assert summary["failed"] == []


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lipbnb", "verify", TOY_POS], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    assert json.loads(proc.stdout)["status"] == "VerifiedNonnegative"
    proc = subprocess.run([sys.executable, "-m", "lipbnb", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "reach" in proc.stdout
