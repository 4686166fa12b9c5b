"""Consensus ADMM over the same expanded blocks, used as a comparison baseline."""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import InputError, NotPositiveDefiniteError
from .graph import OverlapBlocks
from .matrix import StructuredMatrix
from .sync import worker_count


@dataclass
class LiftedBlock:
    k: int
    block: np.ndarray
    H: np.ndarray
    f: np.ndarray
    shared_pos: np.ndarray   # positions in ``block`` of coupled variables
    shared_ids: np.ndarray   # their indices into z


@dataclass
class LiftedProblem:
    blocks: list
    shared: np.ndarray        # global vertex id of each z entry
    multiplicity: np.ndarray  # number of blocks holding each z entry
    owner: np.ndarray
    interior: list
    n: int
    consistent: bool = True

    @property
    def n_coupling_rows(self):
        return int(sum(len(b.shared_pos) for b in self.blocks))


def build_lifted(h: StructuredMatrix, f, blocks: OverlapBlocks, allow_orphans=False) -> LiftedProblem:
    """Duplicate every vertex lying in two or more expanded blocks.

    Each coupling ``H_ij`` (``i != j``) is split evenly over the blocks that
    contain both ends, and diagonal entries keep their coupling share plus an
    even split of the remaining diagonal over the blocks holding the vertex,
    so at consensus the block objectives sum to the original one. A coupling
    whose ends share no block is an orphan and raises unless
    ``allow_orphans`` (the dropped couplings make the lifted problem
    inconsistent with ``Hx = f``).
    """
    f = np.asarray(f, dtype=float)
    n = h.n
    K = blocks.k_blocks
    member = np.zeros((K, n), dtype=bool)
    for k, b in enumerate(blocks.blocks):
        member[k, b] = True
    mult = member.sum(axis=0)
    shared = np.flatnonzero(mult >= 2)
    zpos = np.full(n, -1)
    zpos[shared] = np.arange(len(shared))
    if len(shared) == n and K > 1:
        warnings.warn("every vertex is shared: the consensus vector is the full solution",
                      stacklevel=2)

    coo = sp.triu(h.csr, k=1).tocoo()
    both = member[:, coo.row] & member[:, coo.col]          # (K, nnz_offdiag)
    cnt = both.sum(axis=0)
    orphan = cnt == 0
    consistent = True
    if orphan.any():
        i, j = int(coo.row[orphan][0]), int(coo.col[orphan][0])
        if not allow_orphans:
            raise InputError(
                f"coupling H[{i},{j}] is not contained in any expanded block; increase omega "
                "(the lifted form needs omega >= 1, more for bandwidth-2 matrices)")
        consistent = False
    diag = h.diagonal()
    share = np.where(cnt > 0, 1.0 / np.maximum(cnt, 1), 0.0)

    lifted = []
    for k in range(K):
        b = np.asarray(blocks.blocks[k])
        loc = np.full(n, -1)
        loc[b] = np.arange(len(b))
        sel = both[k]
        r, c, v = coo.row[sel], coo.col[sel], coo.data[sel] * share[sel]
        Hk = np.zeros((len(b), len(b)))
        Hk[loc[r], loc[c]] = v
        Hk[loc[c], loc[r]] = v
        # diagonal: absolute coupling kept in this block plus a 1/mult share of the rest
        absoff = np.zeros(n)
        np.add.at(absoff, r, np.abs(v))
        np.add.at(absoff, c, np.abs(v))
        total_abs = np.zeros(n)
        np.add.at(total_abs, coo.row[~orphan], np.abs(coo.data[~orphan]))
        np.add.at(total_abs, coo.col[~orphan], np.abs(coo.data[~orphan]))
        rest = (diag[b] - total_abs[b]) / mult[b]
        Hk[np.arange(len(b)), np.arange(len(b))] = absoff[b] + rest
        fk = f[b] / mult[b]
        pos = np.flatnonzero(mult[b] >= 2)
        lifted.append(LiftedBlock(k, b, Hk, fk, pos, zpos[b[pos]]))
    return LiftedProblem(lifted, shared, mult[shared], blocks.owner, list(blocks.interior), n,
                         consistent)


@dataclass
class AdmmState:
    x_blocks: list
    z: np.ndarray
    y_blocks: list
    rho: float
    trace: list = field(default_factory=list)   # (iter, time_s, primal_inf, error_inf)
    converged: bool = False
    iterations: int = 0
    x: np.ndarray | None = None
    dual_residual: float = float("inf")
    primal_residual: float = float("inf")
    reached_err: bool = False

    def consensus_gap(self, lifted):
        """``max |x_k[i] - z[i]|`` over every coupling row."""
        gaps = [np.abs(x[lb.shared_pos] - self.z[lb.shared_ids]).max()
                for lb, x in zip(lifted.blocks, self.x_blocks) if len(lb.shared_pos)]
        return float(max(gaps)) if gaps else 0.0


def assemble(lifted: LiftedProblem, x_blocks, positions=None):
    """Global vector taking each vertex from the block that owns it."""
    x = np.zeros(lifted.n)
    for lb, xk in zip(lifted.blocks, x_blocks):
        pos = (np.searchsorted(lb.block, lifted.interior[lb.k]) if positions is None
               else positions[lb.k])
        x[lifted.interior[lb.k]] = xk[pos]
    return x


def admm_solve(lifted: LiftedProblem, rho=1.0, tol=1e-7, max_iter=10_000, x_star=None,
               on_record=None, err_tol=None, workers=None) -> AdmmState:
    """Consensus ADMM: block x-solves, averaging z-update, dual ascent.

    Stops when both the primal residual ``max |x_k[i] - z[i]|`` and the dual
    residual ``rho * max |z - z_prev|`` are within ``tol``. For benchmarks,
    ``err_tol`` (with ``x_star``) stops as soon as the error reaches it.
    ADMM contracts slowly, so small residuals can still leave an error
    a few hundred times larger.
    """
    if rho <= 0:
        raise InputError("rho must be positive")
    nz = len(lifted.shared)
    factors = []
    for lb in lifted.blocks:
        M = lb.H.copy()
        M[lb.shared_pos, lb.shared_pos] += rho
        try:
            factors.append(la.cho_factor(M))
        except la.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                f"ADMM x-update matrix of block {lb.k} is not positive definite", block=lb.k) from exc
    z = np.zeros(nz)
    ys = [np.zeros(len(lb.shared_pos)) for lb in lifted.blocks]
    xs = [np.zeros(len(lb.block)) for lb in lifted.blocks]
    state = AdmmState(xs, z, ys, rho)
    positions = [np.searchsorted(lb.block, lifted.interior[lb.k]) for lb in lifted.blocks]
    nw = worker_count(workers, len(lifted.blocks))
    pool = ThreadPoolExecutor(nw) if nw > 1 else None

    def x_update(k):
        lb = lifted.blocks[k]
        rhs = lb.f.copy()
        rhs[lb.shared_pos] -= ys[k] - rho * z[lb.shared_ids]
        return la.cho_solve(factors[k], rhs, check_finite=False)

    start = time.perf_counter()
    for it in range(1, max_iter + 1):
        ks = range(len(lifted.blocks))
        xs = list(pool.map(x_update, ks)) if pool is not None else [x_update(k) for k in ks]
        acc = np.zeros(nz)
        for k, lb in enumerate(lifted.blocks):
            # shared_ids are distinct within a block, so fancy-index accumulation is exact
            acc[lb.shared_ids] += xs[k][lb.shared_pos] + ys[k] / rho
        z_new = acc / lifted.multiplicity if nz else acc
        primal = 0.0
        for k, lb in enumerate(lifted.blocks):
            gap = xs[k][lb.shared_pos] - z_new[lb.shared_ids]
            ys[k] = ys[k] + rho * gap
            if gap.size:
                primal = max(primal, float(np.abs(gap).max()))
        dual = rho * float(np.abs(z_new - z).max()) if nz else 0.0
        z = z_new
        x = assemble(lifted, xs, positions)
        err = float(np.abs(x - x_star).max()) if x_star is not None else float("nan")
        row = (it, time.perf_counter() - start, primal, err)
        state.trace.append(row)
        if on_record is not None:
            on_record(row)
        state.iterations = it
        state.primal_residual, state.dual_residual = primal, dual
        if primal <= tol and dual <= tol:
            state.converged = True
            break
        if err_tol is not None and err <= err_tol:
            state.reached_err = True
            break
    if pool is not None:
        pool.shutdown()
    state.x_blocks, state.z, state.y_blocks = xs, z, ys
    state.x = assemble(lifted, xs)
    return state
