import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from edproxy.cli import main
from edproxy.grid import case_to_snapshot


@pytest.fixture
def case_file(tmp_path, two_bus_text):
    path = tmp_path / "case2.m"
    path.write_text(two_bus_text)
    return str(path)


@pytest.fixture
def desk_case_file(tmp_path, desk_case):
    path = tmp_path / "desk.json"
    path.write_text(case_to_snapshot(desk_case))
    return str(path)


def test_snapshot_round_trip(case_file, tmp_path, capsys):
    out = str(tmp_path / "snap.json")
    main(["snapshot", "--case", case_file, "--out", out])
    doc = json.loads(open(out).read())
    assert doc["base_mva"] == 100.0
    assert {"base_mva", "buses", "branches", "generators", "slack_bus"} <= set(doc)
    # snapshot is loadable in place of the .m file
    main(["snapshot", "--case", out])
    assert json.loads(capsys.readouterr().out)["slack_bus"] == 1


def test_generate_solve_repair_pipeline(desk_case_file, tmp_path):
    data = str(tmp_path / "data")
    main(["generate", "--case", desk_case_file, "--n", "10",
          "--split", "0.8,0.1,0.1", "--mode", "edr", "--label", "none",
          "--seed", "3", "--out", data])
    assert os.path.exists(os.path.join(data, "manifest.json"))

    solved = str(tmp_path / "solved.jsonl")
    main(["solve", "--case", os.path.join(data, "case.json"),
          "--instances", os.path.join(data, "test.jsonl"),
          "--out", solved, "--tol", "1e-8"])
    lines = [json.loads(x) for x in open(solved)]
    assert all(rec["solution"]["status"] == "optimal" for rec in lines)

    dispatch = str(tmp_path / "dispatch.jsonl")
    with open(dispatch, "w") as fh:
        for rec in lines:
            p = 0.5 * np.array(rec["solution"]["p"])  # deliberately unbalanced
            fh.write(json.dumps({"p": p.tolist()}) + "\n")
    repaired = str(tmp_path / "repaired.jsonl")
    main(["repair", "--case", os.path.join(data, "case.json"),
          "--instances", os.path.join(data, "test.jsonl"),
          "--dispatch", dispatch, "--mode", "balance+reserve", "--out", repaired])
    for raw, rec in zip(open(repaired), lines):
        out = json.loads(raw)
        assert out["certificate"]["feasible"]
        assert sum(out["p"]) == pytest.approx(sum(rec["d"]), abs=1e-8)
        assert sum(out["r"]) >= rec["R"] - 1e-8


def test_generate_deterministic(desk_case_file, tmp_path):
    for sub in ("a", "b"):
        main(["generate", "--case", desk_case_file, "--n", "8", "--mode", "edr",
              "--seed", "11", "--out", str(tmp_path / sub)])
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "case.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_train_and_bench_cli(desk_case_file, tmp_path):
    data = str(tmp_path / "data")
    main(["generate", "--case", desk_case_file, "--n", "40", "--mode", "ed",
          "--label", "reference", "--seed", "5", "--out", data])
    model = str(tmp_path / "model.json")
    main(["train", "--case", os.path.join(data, "case.json"), "--data", data,
          "--arch", "e2elr", "--loss", "ssl", "--seed", "1", "--out", model,
          "--epochs", "3", "--hidden", "8"])
    assert os.path.exists(model)
    log = os.path.splitext(model)[0] + ".log.csv"
    header = open(log).readline().strip()
    assert header == "epoch,train_loss,val_loss,lr,seconds"

    out = str(tmp_path / "bench")
    main(["bench", "--case", os.path.join(data, "case.json"), "--data", data,
          "--models", model, "--out", out])
    assert os.path.exists(os.path.join(out, "gaps.csv"))
    assert os.path.exists(os.path.join(out, "records.jsonl"))


def test_bench_repair_cli(tmp_path, capsys):
    main(["bench-repair", "--n", "64", "--reps", "5", "--mode", "ed",
          "--out", str(tmp_path)])
    out = capsys.readouterr().out
    row = json.loads(out.strip().splitlines()[-1])
    assert row["mode"] == "ed" and row["speedup"] > 0
    assert os.path.exists(tmp_path / "repair_vs_projection.csv")


def test_console_script_installed():
    res = subprocess.run([sys.executable, "-m", "edproxy.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("generate", "solve", "repair", "train", "bench", "bench-repair"):
        assert sub in res.stdout
