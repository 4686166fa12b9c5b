import json

import numpy as np
import pytest

from schwarz_net.cli import RunConfig, main
from schwarz_net.errors import InputError
from schwarz_net.graph import Graph
from schwarz_net.io import load_bundle, read_trace, write_json, write_linear_bundle
from schwarz_net.matrix import StructuredMatrix
from schwarz_net.problems import build_estimation_system, generate_network, simulate_measurements


def gen(tmp_path, *extra, name="bundle"):
    out = tmp_path / name
    assert main(["generate", "--out", str(out), *extra]) == 0
    return out


def test_generate_load_round_trip(tmp_path, capsys):
    out = gen(tmp_path, "--rows", "5", "--cols", "6", "--c", "0.3", "--seed", "7")
    b = load_bundle(out)
    g, y = generate_network("lattice2d", rows=5, cols=6, seed=7)
    p = simulate_measurements(g, y, 0.3, 0.5, noise_seed=8)
    h, f = build_estimation_system(p)
    assert np.array_equal(b.problem.y, p.y) and np.array_equal(b.problem.P_m, p.P_m)
    assert np.array_equal(b.h.toarray(), h.toarray()) and np.array_equal(b.f, f)
    assert b.g.edges() == g.edges()


def test_linear_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    a = a @ a.T + np.eye(5)
    g = Graph.from_edges(5, [(i, j) for i in range(5) for j in range(i + 1, 5)])
    f = rng.normal(size=5)
    write_linear_bundle(tmp_path, g, StructuredMatrix.from_dense(a), f)
    b = load_bundle(tmp_path)
    assert np.array_equal(b.h.toarray(), a) and np.array_equal(b.f, f)


def test_bound_on_demo(tmp_path, capsys):
    demo = gen(tmp_path, "--kind", "demo2x2")
    capsys.readouterr()
    assert main(["bound", str(demo), "--k", "2", "--omega", "0", "--out", str(tmp_path / "b")]) == 0
    assert json.loads(capsys.readouterr().out)["alpha"] == pytest.approx(0.5)
    report = json.loads((tmp_path / "b" / "report.json").read_text())
    assert report["alpha"] == pytest.approx(0.5)


def test_single_block_trace_has_one_row(tmp_path):
    b = gen(tmp_path, "--rows", "4", "--cols", "4")
    out = tmp_path / "s"
    assert main(["solve", str(b), "--k", "1", "--omega", "0", "--out", str(out)]) == 0
    rows = read_trace(out / "trace.csv")
    assert len(rows) == 1 and list(rows[0]) == ["iter", "time_s", "residual_inf"]
    report = json.loads((out / "report.json").read_text())
    assert report["runs"][0]["converged"] and report["runs"][0]["iterations"] == 1
    assert np.load(out / "x.npy").shape == (16,)


def test_partition_command(tmp_path, capsys):
    b = gen(tmp_path, "--rows", "6", "--cols", "6")
    out = tmp_path / "p"
    assert main(["partition", str(b), "--k", "3", "--coupling-weighted", "--out", str(out)]) == 0
    part = json.loads((out / "partition.json").read_text())
    assert part["k"] == 3 and sorted(set(part["assignment"])) == [0, 1, 2]
    assert "Total" in capsys.readouterr().out


def test_omega_sweep_writes_one_trace_each(tmp_path):
    b = gen(tmp_path, "--rows", "6", "--cols", "6")
    out = tmp_path / "sw"
    assert main(["solve", str(b), "--omega", "0", "1", "2", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    its = [r["iterations"] for r in report["runs"]]
    assert its[0] > its[1] > its[2]
    for w in (0, 1, 2):
        assert (out / f"trace_omega{w}.csv").exists()
        assert "alpha" in report["runs"][w]["rate_bound"]
    assert report["stats"]["table"][0][-1] == "Total"


def test_async_modes_and_admm(tmp_path):
    b = gen(tmp_path, "--rows", "5", "--cols", "5")
    for mode in ("async-sim", "async-threaded"):
        out = tmp_path / mode
        assert main(["solve", str(b), "--mode", mode, "--omega", "2", "--out", str(out)]) == 0
        assert json.loads((out / "report.json").read_text())["runs"][0]["converged"]
    header = (tmp_path / "async-threaded" / "trace.csv").read_text().splitlines()[0]
    assert header == "iter,time_s,residual_inf,worker_id,local_iter"
    out = tmp_path / "admm"
    assert main(["admm", str(b), "--rho", "1", "4", "--omega", "2", "--out", str(out)]) == 0
    assert (out / "trace_rho1.csv").exists() and (out / "trace_rho4.csv").exists()


def test_compare_small(tmp_path):
    b = gen(tmp_path, "--rows", "6", "--cols", "6")
    out = tmp_path / "cmp"
    assert main(["compare", str(b), "--omega", "2", "--rho", "1", "4", "--out", str(out)]) == 0
    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0] == "method,param,iter,time_s,residual_inf,error_inf"
    assert {ln.split(",")[0] for ln in lines[1:]} == {"schwarz", "admm"}


def test_constrained_solve(tmp_path):
    b = gen(tmp_path, "--rows", "5", "--cols", "5")
    bounds = tmp_path / "bounds.json"
    write_json(bounds, {"angle_limit": 0.3})
    out = tmp_path / "con"
    assert main(["solve", str(b), "--omega", "2", "--constraints", str(bounds), "--out", str(out)]) == 0
    run = json.loads((out / "report.json").read_text())["runs"][0]
    assert run["converged"] and run["n_active"] > 0


def test_error_exit_codes(tmp_path, capsys):
    out = tmp_path / "err"
    assert main(["solve", str(tmp_path / "missing"), "--out", str(out)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and err["error"] == "InputError"
    assert json.loads((out / "error.json").read_text())["exit_code"] == 2

    # positive definite but strongly coupled: single-vertex blocks diverge
    a = np.full((3, 3), 0.9) + 0.1 * np.eye(3)
    write_linear_bundle(tmp_path / "div", Graph.cycle(3), StructuredMatrix.from_dense(a), np.ones(3))
    out = tmp_path / "derr"
    assert main(["solve", str(tmp_path / "div"), "--k", "3", "--omega", "0", "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "DivergenceError" and err["iteration"] > 0


def test_config_file_and_unknown_keys(tmp_path, capsys):
    b = gen(tmp_path, "--rows", "4", "--cols", "4")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k": 2, "omega": [1], "tol": 1e-10}))
    out = tmp_path / "c"
    assert main(["--config", str(cfg), "solve", str(b), "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["runs"][0]["residual_inf"] <= 1e-10
    cfg.write_text(json.dumps({"k": 2, "omgea": 1}))
    assert main(["--config", str(cfg), "solve", str(b), "--out", str(out)]) == 2
    assert "omgea" in json.loads(capsys.readouterr().err)["message"]
    with pytest.raises(InputError):
        RunConfig.from_dict({"command": "solve", "problem_path": "x", "tol": -1.0})


def test_same_seed_same_trace(tmp_path):
    b = gen(tmp_path, "--rows", "5", "--cols", "5")
    rows = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["solve", str(b), "--mode", "async-sim", "--delay-max", "4", "--seed", "3",
                     "--omega", "1", "--out", str(out)]) == 0
        rows.append([(r["iter"], r["residual_inf"]) for r in read_trace(out / "trace.csv")])
    assert rows[0] == rows[1]
