"""Command-line entry point: ``schwarz-net {generate,partition,bound,solve,admm,compare}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .admm import admm_solve, build_lifted
from .asynchronous import DelaySchedule, async_solve_sim, async_solve_threaded
from .constrained import constrained_sync_solve
from .errors import InputError, SchwarzError, SolverTimeout
from .graph import Graph, expand_overlap, format_stats_table, greedy_partition, partition_stats
from .io import (TraceWriter, load_bundle, load_constraints, load_partition,
                 write_estimation_bundle, write_json, write_linear_bundle)
from .matrix import StructuredMatrix
from .problems import generate_network, simulate_measurements
from .spectral import rate_bound
from .sync import SubproblemBackend, fit_linear_tail, sync_solve

COMMANDS = ("generate", "partition", "bound", "solve", "admm", "compare")
MODES = ("sync", "async-sim", "async-threaded")


@dataclass
class RunConfig:
    command: str
    problem_path: str | None = None
    output_dir: str = "."
    # generate
    kind: str = "lattice2d"
    rows: int = 30
    cols: int = 30
    n: int = 100
    chords: int = 20
    c: float = 0.1
    measured_fraction: float = 0.5
    truth: str = "random_smooth"
    # partitioning
    k: int = 4
    balance: str = "uniform"
    coupling_weighted: bool = False
    partition: str | None = None
    max_omega: int = 4
    # iteration
    omega: list = field(default_factory=lambda: [1])
    tol: float = 1e-8
    max_iter: int = 10_000
    mode: str = "sync"
    backend: str = "factor"
    delay_max: int = 3
    update_prob: float = 1.0
    schedule: str | None = None
    workers: int | None = None
    wall_limit: float = 60.0
    log_every: int = 1
    constraints: str | None = None
    eig_method: str = "auto"
    # admm / compare
    rho: list = field(default_factory=lambda: [1.0, 4.0, 16.0])
    err_target: float = 1e-6
    seed: int = 0

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}")
        if self.command not in ("generate",) and not self.problem_path:
            raise InputError(f"{self.command} needs a problem bundle")
        self.omega = [self.omega] if isinstance(self.omega, int) else list(self.omega)
        self.rho = [self.rho] if isinstance(self.rho, (int, float)) else list(self.rho)
        for name in ("rows", "cols", "n", "k", "max_iter", "log_every", "max_omega"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be at least 1")
        for name in ("tol", "c", "wall_limit", "err_target", "measured_fraction"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.chords < 0 or self.delay_max < 0:
            raise InputError("chords and delay_max must be nonnegative")
        if any(w < 0 for w in self.omega) or not self.omega:
            raise InputError("omega must be a nonnegative integer")
        if any(r <= 0 for r in self.rho) or not self.rho:
            raise InputError("rho must be positive")
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.workers is not None and self.workers < 1:
            raise InputError("workers must be at least 1")
        if self.constraints and self.mode != "sync":
            raise InputError("--constraints is only supported with --mode sync")


def _out(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _partition(cfg, bundle):
    if cfg.partition:
        return load_partition(cfg.partition, bundle.h.n)
    return greedy_partition(bundle.g, cfg.k, balance_mode=cfg.balance, seed=cfg.seed,
                            coupling_matrix=bundle.h if cfg.coupling_weighted else None)


def _stats_block(g, part, max_omega):
    stats = partition_stats(g, part, max_omega)
    return {"table": format_stats_table(stats), "size": stats["size"], "ring": stats["ring"]}


def cmd_generate(cfg):
    out = _out(cfg)
    if cfg.kind == "demo2x2":
        g = Graph.from_edges(2, [(0, 1)])
        h = StructuredMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 2.0]]))
        write_linear_bundle(out, g, h, [3.0, 3.0], {"kind": "demo2x2"})
        return {"bundle": str(out), "n": 2}
    g, y = generate_network(cfg.kind, rows=cfg.rows, cols=cfg.cols, n=cfg.n, chords=cfg.chords,
                            seed=cfg.seed)
    p = simulate_measurements(g, y, cfg.c, cfg.measured_fraction, noise_seed=cfg.seed + 1,
                              truth_mode=cfg.truth)
    write_estimation_bundle(out, p, {"kind": cfg.kind, "seed": cfg.seed})
    return {"bundle": str(out), "n": g.n_vertices, "edges": g.n_edges}


def cmd_partition(cfg):
    out = _out(cfg)
    bundle = load_bundle(cfg.problem_path)
    part = _partition(cfg, bundle)
    write_json(out / "partition.json", part.to_json())
    report = {"k": part.k_blocks, "sizes": part.sizes(),
              "stats": _stats_block(bundle.g, part, cfg.max_omega)}
    write_json(out / "report.json", report)
    for row in report["stats"]["table"]:
        print("\t".join(row))
    return report


def cmd_bound(cfg):
    out = _out(cfg)
    bundle = load_bundle(cfg.problem_path)
    part = _partition(cfg, bundle)
    bounds = []
    for w in cfg.omega:
        rb = rate_bound(bundle.h, bundle.g, expand_overlap(bundle.g, part, w), cfg.eig_method)
        bounds.append(rb.to_json())
    report = {"rate_bounds": bounds, "alpha": bounds[0]["alpha"],
              "stats": _stats_block(bundle.g, part, max(cfg.max_omega, 1))}
    write_json(out / "report.json", report)
    return report


def _trace_name(cfg, w):
    return "trace.csv" if len(cfg.omega) == 1 else f"trace_omega{w}.csv"


def _solve_one(cfg, bundle, part, w, out, backend):
    blocks = expand_overlap(bundle.g, part, w)
    path = out / _trace_name(cfg, w)
    entry = {"omega": w, "mode": cfg.mode, "trace": path.name}
    if cfg.constraints:
        cp = load_constraints(cfg.constraints, bundle.g, bundle.h, bundle.f)
        with TraceWriter(path) as tw:
            st = constrained_sync_solve(cp, blocks, cfg.tol, cfg.max_iter, on_record=tw)
        entry.update(steps_last=st.info["steps"][-1] if st.info["steps"] else None,
                     kkt_residual=st.residual, n_active=len(st.info["active_sets"][-1]),
                     inexact_solves=st.info["inexact_solves"])
    elif cfg.mode == "sync":
        with TraceWriter(path) as tw:
            st = sync_solve(bundle.h, bundle.f, blocks, backend, cfg.tol, cfg.max_iter,
                            workers=cfg.workers, on_record=tw, log_every=cfg.log_every)
    elif cfg.mode == "async-sim":
        if cfg.schedule:
            sched = DelaySchedule.from_file(cfg.schedule)
        elif cfg.delay_max == 0:
            sched = DelaySchedule("zero")
        else:
            sched = DelaySchedule("bounded_random", cfg.delay_max, cfg.seed, cfg.update_prob)
        st = async_solve_sim(bundle.h, bundle.f, blocks, backend, sched, cfg.tol, cfg.max_iter)
        with TraceWriter(path) as tw:
            for row in st.trace[cfg.log_every - 1::cfg.log_every]:
                tw(row)
        entry["max_staleness"] = st.info["max_staleness"]
    else:
        st = async_solve_threaded(bundle.h, bundle.f, blocks, backend, cfg.tol, cfg.wall_limit)
        with TraceWriter(path, extra=("worker_id", "local_iter")) as tw:
            for row in st.trace:
                tw(row)
        entry["local_iterations"] = st.info["local_iterations"]
        if st.info["timed_out"]:
            raise SolverTimeout(f"threaded run hit the {cfg.wall_limit}s wall-clock limit")
    t = max(st.t, 1)
    fit = fit_linear_tail([st.initial_residual] + [r[2] for r in st.trace])
    entry.update(converged=st.converged, iterations=st.t, residual_inf=st.residual,
                 time_s=st.info.get("time_s"), sec_per_iter=st.info.get("time_s", 0.0) / t,
                 measured_rate=fit.rate, tail_r_squared=fit.r_squared)
    if cfg.mode == "sync" and not cfg.constraints:
        try:
            entry["rate_bound"] = rate_bound(bundle.h, bundle.g, blocks, cfg.eig_method).to_json()
        except SchwarzError as exc:
            entry["rate_bound"] = {"error": str(exc)}
    return entry, st


def cmd_solve(cfg):
    out = _out(cfg)
    bundle = load_bundle(cfg.problem_path)
    part = _partition(cfg, bundle)
    backend = SubproblemBackend(cfg.backend)
    runs = []
    report = {"runs": runs, "stats": _stats_block(bundle.g, part, max(cfg.omega + [1]))}
    try:
        for w in cfg.omega:
            entry, st = _solve_one(cfg, bundle, part, w, out, backend)
            runs.append(entry)
            np.save(out / (f"x_omega{w}.npy" if len(cfg.omega) > 1 else "x.npy"), st.x)
    finally:
        report["sec_per_iter"] = {str(r["omega"]): r["sec_per_iter"] for r in runs}
        write_json(out / "report.json", report)
    return report


def _direct(bundle):
    return spla.spsolve(bundle.h.csr.tocsc(), bundle.f)


def cmd_admm(cfg):
    out = _out(cfg)
    bundle = load_bundle(cfg.problem_path)
    part = _partition(cfg, bundle)
    x_star = _direct(bundle)
    lifted = build_lifted(bundle.h, bundle.f, expand_overlap(bundle.g, part, cfg.omega[0]))
    runs = []
    for rho in cfg.rho:
        name = "trace.csv" if len(cfg.rho) == 1 else f"trace_rho{rho:g}.csv"
        with TraceWriter(out / name, extra=("error_inf",)) as tw:
            st = admm_solve(lifted, rho, cfg.tol, cfg.max_iter, x_star,
                            on_record=lambda r: tw((r[0], r[1], r[2], repr(r[3]))),
                            workers=cfg.workers)
        runs.append({"rho": rho, "trace": name, "converged": st.converged,
                     "iterations": st.iterations, "primal_residual": st.primal_residual,
                     "dual_residual": st.dual_residual,
                     "error_inf": float(np.abs(st.x - x_star).max())})
    report = {"omega": cfg.omega[0], "coupling_rows": lifted.n_coupling_rows, "runs": runs}
    write_json(out / "report.json", report)
    return report


def cmd_compare(cfg):
    """Schwarz sync against ADMM at every rho, iterations to ``err_target`` error."""
    out = _out(cfg)
    bundle = load_bundle(cfg.problem_path)
    part = _partition(cfg, bundle)
    x_star = _direct(bundle)
    w = cfg.omega[0]
    blocks = expand_overlap(bundle.g, part, w)
    rows = []
    st = sync_solve(bundle.h, bundle.f, blocks, SubproblemBackend(cfg.backend), cfg.tol,
                    cfg.max_iter, x_star=x_star)
    errs = st.errors
    for t, (it, ts, res) in enumerate(st.trace, start=1):
        rows.append(["schwarz", w, it, ts, res, errs[t]])
    hit = next((t for t, e in enumerate(errs) if e <= cfg.err_target), None)
    summary = [{"method": "schwarz", "omega": w, "iterations_to_target": hit}]
    lifted = build_lifted(bundle.h, bundle.f, blocks)
    for rho in cfg.rho:
        a = admm_solve(lifted, rho, tol=cfg.tol, max_iter=cfg.max_iter, x_star=x_star,
                       err_tol=cfg.err_target)
        for it, ts, primal, err in a.trace:
            rows.append(["admm", rho, it, ts, primal, err])
        hit_a = next((r[0] for r in a.trace if r[3] <= cfg.err_target), None)
        summary.append({"method": "admm", "rho": rho, "iterations_to_target": hit_a})
    with open(out / "compare.csv", "w") as fh:
        fh.write("method,param,iter,time_s,residual_inf,error_inf\n")
        for m, p, it, ts, res, err in rows:
            fh.write(f"{m},{p:g},{it},{ts:.6f},{res!r},{err!r}\n")
    best = [s["iterations_to_target"] for s in summary[1:]]
    report = {"err_target": cfg.err_target, "summary": summary,
              "schwarz_fewer_iterations": hit is not None and all(b is None or hit < b for b in best)}
    write_json(out / "report.json", report)
    return report


HANDLERS = {"generate": cmd_generate, "partition": cmd_partition, "bound": cmd_bound,
            "solve": cmd_solve, "admm": cmd_admm, "compare": cmd_compare}


def run(cfg: RunConfig):
    """Execute one command; returns its report dict."""
    cfg.validate()
    return HANDLERS[cfg.command](cfg)


def _common(p, problem=True):
    if problem:
        p.add_argument("problem_path", help="problem bundle directory")
    p.add_argument("--out", dest="output_dir", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)


def _blocks(p, omega_default=(1,)):
    p.add_argument("--k", type=int, default=4, help="number of blocks")
    p.add_argument("--partition", help="partition JSON instead of the greedy partitioner")
    p.add_argument("--balance", choices=("uniform", "skewed"), default="uniform")
    p.add_argument("--coupling-weighted", action="store_true",
                   help="grow blocks along the strongest |H| couplings first")
    p.add_argument("--omega", type=int, nargs="+", default=list(omega_default),
                   help="overlap radius (several values run a sweep)")
    p.add_argument("--max-omega", type=int, default=4, help="rows in the partition table")


def build_parser():
    ap = argparse.ArgumentParser(prog="schwarz-net",
                                 description="Overlapping decomposition solvers for graph-structured systems.")
    ap.add_argument("--config", help="JSON file with RunConfig keys; command-line flags win")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic problem bundle")
    _common(g, problem=False)
    g.add_argument("--kind", choices=("lattice2d", "random_tree_plus_chords", "demo2x2"),
                   default="lattice2d")
    g.add_argument("--rows", type=int, default=30)
    g.add_argument("--cols", type=int, default=30)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--chords", type=int, default=20)
    g.add_argument("--c", type=float, default=0.1, help="prior weight")
    g.add_argument("--measured-fraction", type=float, default=0.5)
    g.add_argument("--truth", choices=("random_smooth", "zero"), default="random_smooth")

    p = sub.add_parser("partition", help="partition the graph and print block statistics")
    _common(p)
    _blocks(p)

    b = sub.add_parser("bound", help="certified rate bounds per overlap")
    _common(b)
    _blocks(b)
    b.add_argument("--eig-method", choices=("auto", "exact_dense", "gershgorin", "lanczos_estimated"),
                   default="auto")

    s = sub.add_parser("solve", help="run the overlapping scheme")
    _common(s)
    _blocks(s)
    s.add_argument("--mode", choices=MODES, default="sync")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=10_000)
    s.add_argument("--backend", choices=("factor", "cg"), default="factor")
    s.add_argument("--delay-max", type=int, default=3, help="largest staleness for async-sim")
    s.add_argument("--update-prob", type=float, default=1.0,
                   help="chance a block updates at each async-sim step")
    s.add_argument("--schedule", help="trace schedule JSON for async-sim")
    s.add_argument("--workers", type=int)
    s.add_argument("--wall-limit", type=float, default=60.0, help="seconds, async-threaded only")
    s.add_argument("--log-every", type=int, default=1)
    s.add_argument("--constraints", help="bounds.json with soft difference bounds")
    s.add_argument("--eig-method", default="auto")

    a = sub.add_parser("admm", help="consensus ADMM baseline on the same blocks")
    _common(a)
    _blocks(a)
    a.add_argument("--rho", type=float, nargs="+", default=[1.0])
    a.add_argument("--tol", type=float, default=1e-8)
    a.add_argument("--max-iter", type=int, default=10_000)
    a.add_argument("--workers", type=int)

    c = sub.add_parser("compare", help="schwarz against ADMM over a rho grid")
    _common(c)
    _blocks(c, omega_default=(4,))
    c.add_argument("--rho", type=float, nargs="+", default=[1.0, 4.0, 16.0])
    c.add_argument("--tol", type=float, default=1e-10)
    c.add_argument("--max-iter", type=int, default=60_000)
    c.add_argument("--err-target", type=float, default=1e-6)
    c.add_argument("--backend", choices=("factor", "cg"), default="factor")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    data = {}
    try:
        if args.config:
            with open(args.config) as fh:
                data = json.load(fh)
            data.pop("command", None)
        # config-file values replace parser defaults; flags given explicitly win
        defaults = {a.dest: a.default for a in _subparser(ap, args.command)._actions}
        for k, v in vars(args).items():
            if k == "config" or (k in data and v == defaults.get(k)):
                continue
            data[k] = v
        cfg = RunConfig.from_dict(data)
        report = run(cfg)
    except SchwarzError as exc:
        return _fail(exc, exc.exit_code, data.get("output_dir"))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        return _fail(exc, 2, data.get("output_dir"))
    summary = {"command": cfg.command, "output_dir": cfg.output_dir}
    if cfg.command == "bound":
        summary["alpha"] = report["alpha"]
    if cfg.command == "solve":
        summary["runs"] = [{k: r[k] for k in ("omega", "converged", "iterations", "residual_inf")}
                           for r in report["runs"]]
    print(json.dumps(summary, default=float))
    return 0


def _subparser(ap, name):
    for action in ap._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _fail(exc, code, output_dir):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
           "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
    state = getattr(exc, "state", None)
    if state is not None:
        err["iteration"] = state.t
    print(json.dumps(err), file=sys.stderr)
    if output_dir:
        try:
            Path(output_dir).mkdir(parents=True, exist_ok=True)
            write_json(Path(output_dir) / "error.json", err)
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
