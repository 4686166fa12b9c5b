"""Synchronous overlapping block iteration with pluggable subproblem solvers."""

from __future__ import annotations

import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DivergenceError, InputError, NotPositiveDefiniteError
from .graph import OverlapBlocks
from .matrix import StructuredMatrix, SubdomainSystem, project_all

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class SubproblemBackend:
    """``kind="factor"`` factorizes each block once; ``kind="cg"`` runs warm-started CG."""

    kind: str = "factor"
    cg_tol: float = 1e-10
    cg_maxit: int = 10_000

    def __post_init__(self):
        if self.kind not in ("factor", "cg"):
            raise InputError(f"unknown backend {self.kind!r}; expected 'factor' or 'cg'")
        if self.cg_tol <= 0 or self.cg_maxit < 1:
            raise InputError("cg_tol must be positive and cg_maxit at least 1")


def conjugate_gradient(matvec, b, x0=None, tol=1e-10, maxit=10_000):
    """Plain CG on an SPD operator; stops on ``||r||_2 <= tol * ||b||_2``."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - matvec(x)
    bnorm = np.linalg.norm(b)
    stop = tol * bnorm if bnorm > 0 else tol
    rr = r @ r
    if np.sqrt(rr) <= stop:
        return x, 0
    p = r.copy()
    for it in range(1, maxit + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise NotPositiveDefiniteError("CG met a direction of nonpositive curvature")
        a = rr / pAp
        x += a * p
        r -= a * Ap
        rr_new = r @ r
        if np.sqrt(rr_new) <= stop:
            return x, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, maxit


class BlockSolver:
    """Solves ``H_k^w y = rhs`` for one subdomain with the chosen backend."""

    def __init__(self, sub: SubdomainSystem, backend: SubproblemBackend):
        self.sub = sub
        self.backend = backend
        self._last = None
        self.cg_iterations = 0
        if backend.kind == "factor":
            if isinstance(sub.H_block, np.ndarray):
                try:
                    self._chol = la.cho_factor(sub.H_block, lower=False, check_finite=False)
                except la.LinAlgError as exc:
                    raise NotPositiveDefiniteError(
                        f"block {sub.k} is not positive definite (factorization failed)",
                        block=sub.k) from exc
                self._solve = lambda b: la.cho_solve(self._chol, b, check_finite=False)
            else:
                lu = spla.splu(sp.csc_matrix(sub.H_block))
                if np.any(lu.U.diagonal() <= 0):
                    raise NotPositiveDefiniteError(
                        f"block {sub.k} is not positive definite (nonpositive pivot)", block=sub.k)
                self._solve = lu.solve
        else:
            A = sub.H_block
            self._matvec = (lambda v: A @ v)

    def solve(self, rhs):
        if self.backend.kind == "factor":
            return self._solve(rhs)
        y, it = conjugate_gradient(self._matvec, rhs, self._last, self.backend.cg_tol,
                                   self.backend.cg_maxit)
        self.cg_iterations += it
        self._last = y
        return y

    def update(self, x):
        """New interior values of block ``k`` given the global vector ``x``."""
        sub = self.sub
        rhs = sub.f_block - sub.H_cross @ x
        return self.solve(rhs)[sub.restrict_rows]

    def local_residual(self, x):
        sub = self.sub
        r = sub.H_rows @ x - sub.f_block
        return float(np.abs(r).max()) if r.size else 0.0


def build_solvers(h, f, blocks, backend=None, subsystems=None):
    backend = backend or SubproblemBackend()
    if subsystems is None:
        subsystems = project_all(h, f, blocks)
    return [BlockSolver(s, backend) for s in subsystems]


@dataclass
class IterationState:
    """Iterate and trace; ``trace`` rows are ``(t, wall_time_s, residual_inf)``."""

    x: np.ndarray
    t: int = 0
    residual: float = float("inf")
    initial_residual: float = float("inf")
    trace: list = field(default_factory=list)
    converged: bool = False
    iterates: list | None = None
    errors: list | None = None
    info: dict = field(default_factory=dict)

    def residuals(self):
        return np.array([r[2] for r in self.trace])


def worker_count(requested=None, n_blocks=1):
    cap = os.environ.get("SCHWARZ_NET_THREADS")
    w = n_blocks if requested is None else int(requested)
    if cap:
        w = min(w, int(cap))
    return max(1, min(w, n_blocks))


class _DivergenceMonitor:
    """Flags runs whose residual climbs far above the best level seen so far.

    With reads up to ``window`` steps old, an update may legitimately fall
    back to the worst residual inside the window, so the reference level is
    the smallest windowed maximum rather than the smallest residual.
    """

    def __init__(self, factor=DIVERGENCE_FACTOR, window=0):
        self.factor = factor
        self.best = float("inf")
        self.recent = deque(maxlen=window + 1)

    def check(self, residual, state):
        if not np.isfinite(residual) or residual > self.factor * self.best:
            state.info["diverged"] = True
            raise DivergenceError(
                f"scheme diverging at iteration {state.t}: residual {residual:.3e} vs minimum "
                f"{self.best:.3e} (spectral radius of the iteration matrix is likely >= 1)",
                state=state)
        self.recent.append(residual)
        self.best = min(self.best, max(self.recent))


def sync_solve(h: StructuredMatrix, f, blocks: OverlapBlocks, backend: SubproblemBackend = None,
               tol: float = 1e-8, max_iter: int = 10_000, x0=None, workers=None,
               keep_iterates=False, x_star=None, solvers=None, on_record=None,
               log_every: int = 1) -> IterationState:
    """Run the synchronous scheme until the residual drops to ``tol``.

    Each iteration solves every expanded block against the previous iterate
    and keeps only the interior part. The stopping residual is the max over
    blocks of the local residual on the expanded rows, which equals the global
    residual because the expanded blocks cover every row.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    f = np.asarray(f, dtype=float)
    n = h.n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if solvers is None:
        solvers = build_solvers(h, f, blocks, backend)
    K = len(solvers)
    nw = worker_count(workers, K)
    pool = ThreadPoolExecutor(nw) if nw > 1 else None

    state = IterationState(x=x, iterates=[x.copy()] if keep_iterates else None,
                           errors=[] if x_star is not None else None)
    state.info.update(mode="sync", blocks=K, workers=nw, omega=blocks.omega)
    res = max(s.local_residual(x) for s in solvers)
    state.residual = state.initial_residual = res
    if x_star is not None:
        state.errors.append(float(np.abs(x - x_star).max()))
    monitor = _DivergenceMonitor()
    monitor.check(res, state)
    start = time.perf_counter()
    try:
        while res > tol and state.t < max_iter:
            if pool is None:
                parts = [s.update(x) for s in solvers]
            else:
                parts = list(pool.map(lambda s: s.update(x), solvers))
            x_new = x.copy()
            for s, part in zip(solvers, parts):
                x_new[s.sub.interior] = part
            x = x_new
            state.t += 1
            res = max(s.local_residual(x) for s in solvers)
            state.x, state.residual = x, res
            if keep_iterates:
                state.iterates.append(x.copy())
            if x_star is not None:
                state.errors.append(float(np.abs(x - x_star).max()))
            if state.t % log_every == 0 or res <= tol:
                row = (state.t, time.perf_counter() - start, res)
                state.trace.append(row)
                if on_record is not None:
                    on_record(row)
            monitor.check(res, state)
    finally:
        if pool is not None:
            pool.shutdown()
    state.converged = res <= tol
    state.info["time_s"] = time.perf_counter() - start
    return state


@dataclass
class RateMeasurement:
    rate: float
    tail_length: int
    inconclusive: bool
    ratios: np.ndarray = field(default=None, repr=False)


def verify_linear_rate(state: IterationState, x_star, floor=1e-12) -> RateMeasurement:
    """Worst one-step error contraction over the tail of a run.

    The tail starts at the first iterate whose residual is below 1% of the
    initial residual; the step into that iterate is included. Steps out of
    iterates already at rounding level (``floor`` relative to ``x_star``) are
    skipped.
    """
    if state.iterates is None:
        raise InputError("run the solver with keep_iterates=True to measure the rate")
    x_star = np.asarray(x_star, dtype=float)
    errs = np.array([np.abs(x - x_star).max() for x in state.iterates])
    res = np.array([state.initial_residual] + [r[2] for r in state.trace])
    if len(res) != len(errs):
        # sparse logging: fall back to errors for the tail start
        res = errs * (state.initial_residual / errs[0] if errs[0] > 0 else 1.0)
    below = np.flatnonzero(res <= 1e-2 * state.initial_residual)
    scale = floor * max(1.0, float(np.abs(x_star).max()))
    if below.size == 0:
        return RateMeasurement(float("nan"), 0, True, np.array([]))
    t0 = max(int(below[0]), 1)
    ratios = []
    exact = False
    for t in range(t0 - 1, len(errs) - 1):
        if errs[t] <= scale:
            exact = True
            break
        ratios.append(errs[t + 1] / errs[t])
        if errs[t + 1] <= scale:
            exact = True
    ratios = np.array(ratios)
    rate = float(ratios.max()) if ratios.size else 0.0
    return RateMeasurement(rate, len(ratios), len(ratios) < 5 and not exact, ratios)


@dataclass
class TailFit:
    rate: float        # fitted per-iteration residual factor
    r_squared: float
    start: int
    length: int


def fit_linear_tail(residuals, initial=None, start_fraction=1e-2, floor=1e-14) -> TailFit:
    """Least-squares line through ``log10(residual)`` over the tail of a trace.

    The tail begins at the first residual below ``start_fraction`` times the
    initial one; residuals at or below ``floor`` are dropped.
    """
    r = np.asarray(residuals, dtype=float)
    initial = r[0] if initial is None else initial
    idx = np.flatnonzero(r <= start_fraction * initial)
    if idx.size == 0:
        return TailFit(float("nan"), float("nan"), len(r), 0)
    t = np.arange(idx[0], len(r))
    t = t[r[t] > floor]
    if t.size < 3:
        return TailFit(float("nan"), float("nan"), int(idx[0]), int(t.size))
    y = np.log10(r[t])
    slope, icpt = np.polyfit(t, y, 1)
    ss_res = float(((y - (slope * t + icpt)) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return TailFit(float(10 ** slope), r2, int(idx[0]), int(t.size))
