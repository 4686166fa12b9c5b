"""Overlapping scheme in the optimization space with soft angle-difference bounds.

The objective is ``phi(x) = x'Hx/2 - f'x + mu/2 * sum_e s_e**2`` where the
slack ``s_e`` is the amount by which ``x_i - x_j`` leaves ``[lo_e, hi_e]``.
Minimizing over the slacks gives a convex, once-differentiable piecewise
quadratic, so every block subproblem is feasible and strongly convex.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import DivergenceError, InputError
from .graph import OverlapBlocks
from .matrix import StructuredMatrix
from .sync import IterationState

ACTIVE_THRESHOLD = 1e-6


@dataclass
class ConstrainedProblem:
    h: StructuredMatrix
    f: np.ndarray
    edges: np.ndarray      # (m, 2): the row is x[i] - x[j]
    lower: np.ndarray
    upper: np.ndarray
    mu: float | np.ndarray | None = None   # one weight for all rows, or one per row

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        m = len(self.edges)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (m,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (m,)).copy()
        if np.any(self.lower >= self.upper):
            raise InputError("every bound row needs lower < upper")
        if self.mu is None:
            self.mu = 1e3 * float(self.h.diagonal().max())
        self.weights = np.broadcast_to(np.asarray(self.mu, dtype=float), (m,)).copy()
        if np.any(self.weights <= 0):
            raise InputError("penalty weight mu must be positive")
        if np.any(self.edges < 0) or np.any(self.edges >= self.h.n):
            raise InputError("bound row refers to a vertex outside the matrix")

    @classmethod
    def angle_bounds(cls, h, f, g, limit=np.pi / 4, mu=None):
        """``-limit <= x_i - x_j <= limit`` on every edge of ``g``."""
        edges = np.array(g.edges(), dtype=np.int64).reshape(-1, 2)
        return cls(h, f, edges, -limit, limit, mu)

    def differences(self, x):
        return x[self.edges[:, 0]] - x[self.edges[:, 1]]

    def slacks(self, x):
        d = self.differences(x)
        return np.maximum(0.0, d - self.upper) + np.maximum(0.0, self.lower - d)

    def objective(self, x):
        s = self.slacks(x)
        return float(0.5 * x @ (self.h.csr @ x) - self.f @ x + 0.5 * (self.weights * s) @ s)

    def gradient(self, x):
        d = self.differences(x)
        v = np.maximum(0.0, d - self.upper) - np.maximum(0.0, self.lower - d)
        g = self.h.csr @ x - self.f
        np.add.at(g, self.edges[:, 0], self.weights * v)
        np.add.at(g, self.edges[:, 1], -self.weights * v)
        return g

    def kkt_residual(self, x):
        return float(np.abs(self.gradient(x)).max())

    def active_set(self, x, threshold=ACTIVE_THRESHOLD):
        d = self.differences(x)
        return frozenset(np.flatnonzero((d >= self.upper - threshold)
                                        | (d <= self.lower + threshold)).tolist())

    def reduced_matrix(self, active):
        """Hessian of the soft problem with the given rows penalized."""
        idx = np.fromiter(sorted(active), dtype=np.int64)
        if idx.size == 0:
            return self.h
        e = self.edges[idx]
        m = len(idx)
        A = sp.csr_matrix((np.r_[np.ones(m), -np.ones(m)],
                           (np.r_[np.arange(m), np.arange(m)], np.r_[e[:, 0], e[:, 1]])),
                          shape=(m, self.h.n))
        W = sp.diags(self.weights[idx])
        return StructuredMatrix(self.h.csr + A.T @ W @ A, symmetric=True)


class _BlockQP:
    """Soft-constrained subproblem on one expanded block with the exterior frozen."""

    def __init__(self, p: ConstrainedProblem, blocks: OverlapBlocks, k: int):
        self.p = p
        self.block = np.asarray(blocks.blocks[k])
        self.interior = np.asarray(blocks.interior[k])
        self.restrict = blocks.restrict_positions(k)
        n = p.h.n
        inside = np.zeros(n, dtype=bool)
        inside[self.block] = True
        loc = np.full(n, -1)
        loc[self.block] = np.arange(len(self.block))
        rows = p.h.csr[self.block]
        self.H = rows[:, self.block].toarray()
        coo = rows.tocoo()
        keep = ~inside[coo.col]
        self.cross = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=rows.shape)
        self.f = p.f[self.block]
        i, j = p.edges[:, 0], p.edges[:, 1]
        touch = np.flatnonzero(inside[i] | inside[j])
        self.rows = touch
        ii, jj = i[touch], j[touch]
        m = len(touch)
        r, c, v = [], [], []
        for t in range(m):
            if inside[ii[t]]:
                r.append(t), c.append(loc[ii[t]]), v.append(1.0)
            if inside[jj[t]]:
                r.append(t), c.append(loc[jj[t]]), v.append(-1.0)
        self.A = sp.csr_matrix((v, (r, c)), shape=(m, len(self.block)))
        self.out_i = np.where(inside[ii], -1, ii)
        self.out_j = np.where(inside[jj], -1, jj)
        self.lo = p.lower[touch]
        self.hi = p.upper[touch]
        self.w = p.weights[touch]
        self._cache = {}

    def _factor(self, active):
        key = active.tobytes()
        fac = self._cache.get(key)
        if fac is None:
            Aa = self.A[active]
            M = self.H + (Aa.T @ sp.diags(self.w[active]) @ Aa).toarray()
            fac = la.cho_factor(M, check_finite=False)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = fac
        return fac

    def solve(self, x, tol=1e-8, maxit=100, abs_tol=None):
        """Minimize over the block; returns ``(y_block, newton_steps, converged)``.

        Stops when the block gradient is within ``tol`` relative to the
        right-hand side, or within ``abs_tol`` if that is smaller.
        """
        w = self.w
        off = np.zeros(len(self.rows))
        mask = self.out_i >= 0
        off[mask] += x[self.out_i[mask]]
        mask = self.out_j >= 0
        off[mask] -= x[self.out_j[mask]]
        rhs = self.f - self.cross @ x
        scale = max(1.0, float(np.abs(rhs).max()))
        if abs_tol is not None:
            tol, scale = min(tol * scale, abs_tol), 1.0

        def parts(y):
            d = self.A @ y + off
            up = np.maximum(0.0, d - self.hi)
            dn = np.maximum(0.0, self.lo - d)
            return d, up, dn

        def value(y):
            _, up, dn = parts(y)
            return 0.5 * y @ (self.H @ y) - rhs @ y + 0.5 * (w * (up * up + dn * dn)).sum()

        y = x[self.block].copy()
        for it in range(1, maxit + 1):
            d, up, dn = parts(y)
            grad = self.H @ y - rhs + self.A.T @ (w * (up - dn))
            if np.abs(grad).max() <= tol * scale:
                return y, it - 1, True
            active = (up > 0) | (dn > 0)
            step = -la.cho_solve(self._factor(active), grad, check_finite=False)
            f0 = value(y)
            slope = grad @ step
            slack = 1e-13 * max(1.0, abs(f0))   # rounding floor of the objective
            t = 1.0
            for _ in range(40):
                if value(y + t * step) <= f0 + 1e-4 * t * slope + slack:
                    break
                t *= 0.5
            else:
                # no decrease is measurable any more: we are at rounding level
                return y, it, bool(np.abs(grad).max() <= 1e3 * tol * scale)
            y = y + t * step
        d, up, dn = parts(y)
        grad = self.H @ y - rhs + self.A.T @ (w * (up - dn))
        return y, maxit, bool(np.abs(grad).max() <= tol * scale)


def constrained_subsolve(p: ConstrainedProblem, blocks: OverlapBlocks, k: int, x_current,
                         inner_tol=1e-8, _qp=None):
    """Block ``k``'s minimizer of the soft problem with the exterior frozen, on ``V_k``."""
    qp = _qp or _BlockQP(p, blocks, k)
    y, _, ok = qp.solve(np.asarray(x_current, dtype=float), inner_tol)
    if not ok:
        warnings.warn(f"block {k}: inner solve stopped before reaching {inner_tol}", stacklevel=2)
    return y[qp.restrict]


def constrained_sync_solve(p: ConstrainedProblem, blocks: OverlapBlocks, tol=1e-8,
                           max_iter=1000, x0=None, x_star=None, keep_iterates=False,
                           inner_tol=1e-10, on_record=None) -> IterationState:
    """Synchronous outer loop over block minimizations.

    Trace rows are ``(t, time_s, kkt_inf)``; step sizes and active sets are
    kept in ``info``. Converged when both the step and the gradient of the
    soft problem are within ``tol``.
    """
    n = p.h.n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    qps = [_BlockQP(p, blocks, k) for k in range(blocks.k_blocks)]
    state = IterationState(x=x, iterates=[x.copy()] if keep_iterates else None,
                           errors=[] if x_star is not None else None)
    kkt = p.kkt_residual(x)
    state.residual = state.initial_residual = kkt
    steps, active_sets, inexact = [], [p.active_set(x)], 0
    best = kkt
    start = time.perf_counter()
    step = float("inf")
    # blocks spanning every vertex solve the whole problem, so no confirming step is needed
    whole = all(len(b) == n for b in blocks.blocks)
    done = lambda: kkt <= tol and (step <= tol or (whole and state.t > 0))  # noqa: E731
    while state.t < max_iter and not done():
        x_new = x.copy()
        for qp in qps:
            y, _, ok = qp.solve(x, inner_tol, abs_tol=0.1 * tol)
            inexact += not ok
            x_new[qp.interior] = y[qp.restrict]
        step = float(np.abs(x_new - x).max())
        x = x_new
        state.t += 1
        kkt = p.kkt_residual(x)
        state.x, state.residual = x, kkt
        steps.append(step)
        active_sets.append(p.active_set(x))
        if keep_iterates:
            state.iterates.append(x.copy())
        if x_star is not None:
            state.errors.append(float(np.abs(x - x_star).max()))
        row = (state.t, time.perf_counter() - start, kkt)
        state.trace.append(row)
        if on_record is not None:
            on_record(row)
        if not np.isfinite(kkt) or kkt > 1e6 * best:
            raise DivergenceError(f"constrained scheme diverging at iteration {state.t}",
                                  state=state)
        best = min(best, kkt)
        if step == 0.0 and kkt > tol:
            state.info["stalled"] = True    # inner solves cannot improve further
            break
    state.converged = done()
    state.info.update(mode="constrained-sync", steps=steps, active_sets=active_sets,
                      inexact_solves=inexact, omega=blocks.omega,
                      slacks=p.slacks(x), time_s=time.perf_counter() - start)
    return state


def solve_soft_problem(p: ConstrainedProblem, tol=1e-12, maxit=200):
    """Centralized minimizer of the soft problem (Newton with the same active-set logic)."""
    n = p.h.n
    every = np.arange(n)
    whole = OverlapBlocks(0, [every], [every], [np.array([], dtype=np.int64)], n, np.zeros(n, dtype=np.int64))
    return _BlockQP(p, whole, 0).solve(np.zeros(n), tol, maxit)[0]


def settled_tail(state: IterationState, window=10):
    """First iteration after which the detected active set stays fixed for ``window`` steps."""
    sets = state.info["active_sets"]
    run = 1
    for t in range(1, len(sets)):
        run = run + 1 if sets[t] == sets[t - 1] else 1
        if run >= window:
            return t - window + 1, sets[t]
    return None, None


def tail_rate(state: IterationState, window=10, floor=1e-10):
    """Worst one-step error ratio after the active set settles.

    Needs a run with ``x_star`` (``state.errors``). Ratios stop once the error
    reaches ``floor``, where rounding dominates. Returns ``(rate, n_ratios, settled_set)``;
    ``rate`` is nan if the active set never settled.
    """
    t0, active = settled_tail(state, window)
    if t0 is None:
        return float("nan"), 0, None
    e = np.asarray(state.errors)
    ratios = []
    for t in range(t0, len(e) - 1):
        if e[t] <= floor:
            break
        ratios.append(e[t + 1] / e[t])
    return (max(ratios) if ratios else 0.0), len(ratios), active
