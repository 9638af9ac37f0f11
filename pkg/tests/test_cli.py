import json
import logging

import numpy as np
import pytest

from smalldiv import cli
from smalldiv.measure import melnikov_initial_set
from smalldiv.nls_operator import preset, read_table, write_table

FAST = {"certify": False}


def config(tmp_path, name="cfg.json", **kw):
    data = {"schema_version": 1, **kw}
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def run(tmp_path, command, out="out", **kw):
    return cli.main([command, "--config", config(tmp_path, **kw), "--out", str(tmp_path / out)])


def record(tmp_path, out="out"):
    return json.loads((tmp_path / out / "run_record.json").read_text())


# --- solve

def test_solve_linear_forced(tmp_path):
    code = run(tmp_path, "solve", problem="linear-forced", solver=FAST)
    assert code == 0
    rec = record(tmp_path)
    scale = 1 + rec["norms"]["2.0"]
    assert rec["verdict"] == "converged"
    assert rec["history"][-1]["residual"]["r_full"]["2.0"] <= 1e-12 * scale
    coeffs, nu, d = read_table(tmp_path / "out" / "solution.txt")
    assert (nu, d) == (1, 1) and coeffs.shape == (33, 33)


def test_solve_cubic(tmp_path):
    assert run(tmp_path, "solve", solver=FAST) == 0
    assert record(tmp_path)["verdict"] == "converged"


def test_solve_on_resonance_is_excluded(tmp_path):
    M = melnikov_initial_set(preset("cubic-d1").assembly(), 4, gamma=0.1)
    lam = 0.5 * sum(M.intervals[0])
    assert run(tmp_path, "solve", solver={**FAST, "lam": lam}) == 2
    assert record(tmp_path)["verdict"] == "excluded-at-stage-0"


def test_solve_stagnation_exit(tmp_path):
    assert run(tmp_path, "solve", solver={**FAST, "inner_max": 1}) == 3
    assert record(tmp_path)["verdict"] == "stagnated"


def test_forcing_table_reproduces_preset(tmp_path):
    g = np.zeros((3, 3), complex)
    g[0, 0] = g[0, 2] = g[2, 0] = g[2, 2] = 0.25
    write_table(tmp_path / "g.txt", g, 1, 1)
    solver = {**FAST, "Ns": [4, 8], "n_max": 2}
    assert run(tmp_path, "solve", out="a", solver=solver) == 0
    assert run(tmp_path, "solve", out="b", solver=solver,
               forcing_table=str(tmp_path / "g.txt")) == 0
    a, _, _ = read_table(tmp_path / "a" / "solution.txt")
    b, _, _ = read_table(tmp_path / "b" / "solution.txt")
    assert np.abs(a - b).max() <= 1e-14


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SMALLDIV_SEED", "77")
    run(tmp_path, "solve", solver={**FAST, "Ns": [4], "n_max": 1})
    assert record(tmp_path)["seed"] == 77


# --- errors

@pytest.mark.parametrize("text", ["{", "[1, 2]", '{"schema_version": 2}',
                                  '{"schema_version": 1, "bogus": 1}',
                                  '{"schema_version": 1, "problem": "quartic"}',
                                  '{"schema_version": 1, "solver": {"N_0": 4}}',
                                  '{"schema_version": 1, "sweep": {"grid": [0, 3]}}',
                                  '{"schema_version": 1, "forcing_table": "missing.txt"}'])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    cmd = "sweep" if "sweep" in text else "solve"
    assert cli.main([cmd, "--config", str(p), "--out", str(tmp_path)]) == 64


def test_missing_config_file(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "none.json")]) == 64


def test_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = cli.main(["solve", "--config", config(tmp_path, solver={**FAST, "Ns": [4], "n_max": 1}),
                     "--out", str(blocker / "sub")])
    assert code == 74


# --- sweep

SWEEP = {"grid": [2, 2], "Ns": [4, 6, 8], "lambda_range": [0.8, 1.2]}


def test_sweep_is_byte_identical(tmp_path):
    assert run(tmp_path, "sweep", out="a", sweep=SWEEP) == 0
    assert run(tmp_path, "sweep", out="b", sweep=SWEEP) == 0
    a = (tmp_path / "a" / "sweep.csv").read_bytes()
    assert a == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert a.decode().splitlines()[0] == "N,eps,lambda,good_weak,good_l2,worst_j0,interval_count"
    summary = json.loads((tmp_path / "a" / "sweep_summary.json").read_text())
    assert summary["N"] == [4, 6, 8] and "slope_measure_fraction" in summary


def test_one_node_sweep_matches_solve(tmp_path):
    solver = {**FAST, "Ns": [4, 8], "n_max": 2}
    sweep = {"grid": [1, 1], "eps_range": [1e-3, 1e-3], "lambda_range": [0.9, 0.9],
             "solve_nodes": True}
    assert run(tmp_path, "sweep", out="s", sweep=sweep, solver=solver) == 0
    assert run(tmp_path, "solve", out="r", solver={**solver, "eps": 1e-3, "lam": 0.9}) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 2
    verdicts = (tmp_path / "s" / "verdicts.csv").read_text().splitlines()
    assert len(verdicts) == 2
    e, lam, verdict, N, r0 = verdicts[1].split(",")
    rec = record(tmp_path, "r")
    assert verdict == rec["verdict"] and int(N) == rec["final_N"]
    assert float(r0) == rec["history"][-1]["residual"]["r_full"]["2.0"]


# --- other commands

def test_cluster_report(tmp_path):
    assert run(tmp_path, "cluster-report", clusters={"theta_count": 5}) == 0
    summary = json.loads((tmp_path / "out" / "cluster_summary.json").read_text())
    assert summary["passed"] and summary["thetas"] == 5


def test_certify_inverse(tmp_path):
    assert run(tmp_path, "certify-inverse", certify={"instances": 2}) == 0
    rep = json.loads((tmp_path / "out" / "certify_inverse.json").read_text())
    assert rep["exact"] and rep["certificate_passes"] == 2


def test_selftest_fresh_corrupted_and_faulty(tmp_path, caplog, capsys):
    kw = {"selftest": {"count": 40}}
    assert run(tmp_path, "selftest", **kw) == 0
    manifest = tmp_path / "out" / "constants.json"
    assert manifest.exists()
    manifest.write_text("not json")
    with caplog.at_level(logging.WARNING):
        assert run(tmp_path, "selftest", **kw) == 0
    assert "regenerating" in caplog.text
    json.loads(manifest.read_text())
    capsys.readouterr()
    code = cli.main(["selftest", "--config", config(tmp_path, **kw), "--out",
                     str(tmp_path / "out"), "--inject-C", "0.1"])
    assert code == 1
    assert "FAIL interpolation" in capsys.readouterr().out
