from __future__ import annotations

import json
import math
import os
import subprocess
import sys

import pytest

from coalflow.cli import manifest_path, replay, run_command
from coalflow.model import RunManifest
from coalflow.web import SCHEMA_HEADER

SMALL = {
    "meet": ["meet", "--C", "-1", "0.5", "--t", "0.5", "--reps", "300", "--dt", "1e-3"],
    "cluster": ["cluster", "--t", "0.01", "--grid-m", "10", "--reps", "50"],
    "trotter": ["trotter", "--drift", "cosine", "linear:1", "--partition-N", "4", "--reps", "50",
                "--dt", "1e-3", "--compare-direct"],
    "prop1": ["prop1", "--n", "4", "--reps", "100", "--dt", "1e-3", "--sanity"],
    "sandwich": ["sandwich", "--reps", "100", "--dt", "1e-3"],
    "webtest": ["webtest", "--reps", "100", "--dt", "1e-3"],
    "oracle": ["oracle", "--what", "survival", "--C", "0.5", "--t", "0.25", "1"],
}


def test_oracle_phi_prints_json(capsys):
    assert run_command(["oracle", "--what", "phi", "--C", "0.5", "--t", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] == pytest.approx(1 - math.exp(-1))
    assert run_command(["oracle", "--what", "phi", "--C", "0.5", "--t", "1",
                        "--scale", str(math.sqrt(2))]) == 0
    assert json.loads(capsys.readouterr().out)["value"] == pytest.approx(0.53522, abs=5e-5)


@pytest.mark.parametrize("what", ["phi", "survival", "never", "hitting", "l", "lbound", "cluster",
                                  "cluster-limit", "normcdf", "prop1"])
def test_every_oracle_runs(what, capsys):
    assert run_command(["oracle", "--what", what]) == 0
    assert "value" in json.loads(capsys.readouterr().out)


def test_unknown_flag_exits_2_without_output(tmp_path, capsys):
    out = tmp_path / "x.json"
    assert run_command(["meet", "--bogus", "1", "--out", str(out)]) == 2
    assert "usage" in capsys.readouterr().err
    assert not out.exists()
    assert run_command(["fly"]) == 2
    assert run_command(["meet", "--reps", "many"]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    out = tmp_path / "x.json"
    assert run_command(["sandwich", "--c-alpha", "0.2", "--reps", "10", "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "error" in err and len(err.strip().splitlines()) == 1
    assert not out.exists()
    assert run_command(["meet", "--u1", "1", "--u2", "0", "--reps", "10"]) == 1
    assert run_command(["trotter", "--partition-N", "4", "--dt", "0.5", "--reps", "10"]) == 1
    assert run_command(["meet", "--drift", "sine", "--reps", "10"]) == 1
    assert run_command(["meet", "--reps", "1"]) == 1


@pytest.mark.parametrize("name", sorted(SMALL))
@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_same_argv_gives_identical_bytes_and_manifest_replays(name, fmt, tmp_path):
    a, b, c = (tmp_path / f"{k}.{fmt}" for k in "abc")
    argv = SMALL[name] + ["--format", fmt]
    assert run_command(argv + ["--out", str(a)]) == 0
    assert run_command(argv + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    m = RunManifest.read(manifest_path(a))
    assert m.command == name and m.master_seed == 0 and m.outputs == [str(a)]
    assert replay(manifest_path(a), out=c) == 0
    assert a.read_bytes() == c.read_bytes()
    if fmt == "csv":
        assert a.read_text().splitlines()[0] == SCHEMA_HEADER


def test_seed_changes_output(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run_command(SMALL["meet"] + ["--out", str(a)])
    run_command(SMALL["meet"] + ["--seed", "1", "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_meet_csv_columns(tmp_path):
    one = tmp_path / "one.csv"
    run_command(["meet", "--reps", "5", "--dt", "1e-2", "--format", "csv", "--out", str(one)])
    assert one.read_text().splitlines()[1] == "replica,met,time"
    two = tmp_path / "two.csv"
    run_command(["meet", "--C", "1", "2", "--reps", "5", "--dt", "1e-2", "--format", "csv",
                 "--out", str(two)])
    lines = two.read_text().splitlines()
    assert lines[1] == "drift,replica,met,time" and len(lines) == 12


def test_output_independent_of_thread_count(tmp_path):
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"t{threads}.json"
        env = dict(os.environ, COALFLOW_THREADS=threads)
        env.pop("NUMBA_NUM_THREADS", None)
        subprocess.run([sys.executable, "-m", "coalflow", *SMALL["trotter"], "--out", str(out)],
                       env=env, check=True, capture_output=True)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
