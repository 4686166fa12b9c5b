"""Sparse symmetric matrices tied to a graph.

Restriction operators are never materialized: projections onto an expanded
block are index gathers on the CSR storage.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import BandwidthError, InputError
from .graph import Graph, OverlapBlocks

DENSE_BLOCK_LIMIT = 512


class StructuredMatrix:
    """Square real matrix in CSR form with sorted columns and no explicit zeros."""

    def __init__(self, data, symmetric=None):
        csr = sp.csr_matrix(data, dtype=float, copy=True)
        if csr.shape[0] != csr.shape[1]:
            raise InputError(f"matrix must be square, got {csr.shape}")
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        self.csr = csr
        exact = (csr != csr.T).nnz == 0
        if symmetric is None:
            symmetric = exact
        elif symmetric and not exact:
            raise InputError("matrix declared symmetric but storage is not exactly symmetric")
        self.symmetric = bool(symmetric)

    @classmethod
    def from_dense(cls, a, symmetric=None):
        return cls(sp.csr_matrix(np.asarray(a, dtype=float)), symmetric)

    @classmethod
    def from_coo(cls, n, rows, cols, vals, symmetric=None):
        return cls(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)), symmetric)

    @property
    def n(self):
        return self.csr.shape[0]

    @property
    def nnz(self):
        return self.csr.nnz

    def toarray(self):
        return self.csr.toarray()

    def diagonal(self):
        return self.csr.diagonal()

    def row_support(self, i):
        lo, hi = self.csr.indptr[i], self.csr.indptr[i + 1]
        return self.csr.indices[lo:hi], self.csr.data[lo:hi]

    def __matmul__(self, other):
        if isinstance(other, StructuredMatrix):
            return StructuredMatrix(self.csr @ other.csr)
        return self.csr @ other

    def __add__(self, other):
        return StructuredMatrix(self.csr + other.csr)

    def __repr__(self):
        return f"StructuredMatrix(n={self.n}, nnz={self.nnz}, symmetric={self.symmetric})"


def _max_pair_distance(g: Graph, csr, row_ids=None, col_ids=None) -> int:
    """Largest graph distance over the nonzeros of ``csr``.

    ``row_ids``/``col_ids`` map local row/column positions to graph vertices
    (identity when omitted). BFS from each row stops as soon as the row's
    columns have all been reached.
    """
    best = 0
    for r in range(csr.shape[0]):
        cols = csr.indices[csr.indptr[r]:csr.indptr[r + 1]]
        if cols.size == 0:
            continue
        src = r if row_ids is None else int(row_ids[r])
        targets = set((cols if col_ids is None else col_ids[cols]).tolist())
        targets.discard(src)
        if not targets:
            continue
        dist = {src: 0}
        queue = deque([src])
        found = 0
        far = 0
        while queue and found < len(targets):
            u = queue.popleft()
            for v in g.adjacency[u]:
                v = int(v)
                if v in dist:
                    continue
                dist[v] = dist[u] + 1
                queue.append(v)
                if v in targets:
                    found += 1
                    far = dist[v]
        if found < len(targets):
            missing = sorted(targets - dist.keys())[0]
            raise BandwidthError(
                f"nonzero at ({src}, {missing}) joins disconnected vertices: bandwidth is infinite")
        best = max(best, far)
    return best


def bandwidth(m: StructuredMatrix, g: Graph) -> int:
    """Generalized bandwidth: max graph distance between coupled indices."""
    if m.n > g.n_vertices:
        raise InputError("matrix dimension exceeds the number of graph vertices")
    csr = m.csr if isinstance(m, StructuredMatrix) else sp.csr_matrix(m)
    return _max_pair_distance(g, csr)


def block_bandwidth(h: StructuredMatrix, g: Graph, vertices) -> int:
    """Bandwidth of the principal submatrix on ``vertices`` using global distances."""
    vertices = np.asarray(vertices)
    sub = h.csr[vertices][:, vertices]
    return _max_pair_distance(g, sub.tocsr(), vertices, vertices)


def structure_ratio(m: StructuredMatrix, g: Graph, warn_above=0.25):
    """Bandwidth divided by diameter; warns when the matrix is barely graph-structured."""
    b = bandwidth(m, g)
    diam = g.diameter()
    ratio = b / diam if diam else float("inf") if b else 0.0
    if ratio > warn_above:
        warnings.warn(f"bandwidth/diameter = {ratio:.3g} exceeds {warn_above}; "
                      "overlap gains will be limited", stacklevel=2)
    return ratio


@dataclass
class BandwidthReport:
    bw_a: int
    bw_b: int
    bw_sum: int
    bw_product: int
    lemma1_holds: bool


def check_bandwidth_algebra(a: StructuredMatrix, b: StructuredMatrix, g: Graph) -> BandwidthReport:
    """Bandwidths of ``a``, ``b``, ``a+b`` and ``ab`` and whether sums/products stay bounded."""
    if a.n != b.n:
        raise InputError(f"dimension mismatch: {a.n} vs {b.n}")
    ba, bb = bandwidth(a, g), bandwidth(b, g)
    bs = bandwidth(a + b, g)
    bp = bandwidth(a @ b, g)
    return BandwidthReport(ba, bb, bs, bp, bs <= max(ba, bb) and bp <= ba + bb)


@dataclass
class SubdomainSystem:
    """Projected system of one expanded block.

    ``H_cross`` is a CSR matrix of shape ``(len(block), n)`` that is nonzero
    only on columns outside the block, so ``H_cross @ x`` is the boundary
    contribution. ``H_rows`` holds the full rows of H for the block, used for
    local residuals.
    """

    k: int
    interior: np.ndarray
    block: np.ndarray
    H_block: object
    H_cross: sp.csr_matrix
    H_rows: sp.csr_matrix
    f_block: np.ndarray
    restrict_rows: np.ndarray

    @property
    def size(self):
        return len(self.block)

    def dense_block(self):
        return self.H_block if isinstance(self.H_block, np.ndarray) else self.H_block.toarray()

    def cross_entries(self):
        """``(local_row, global_col, value)`` triples of the boundary coupling."""
        coo = self.H_cross.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def coupling_strength(self):
        """Sum of absolute couplings between the block and its complement."""
        return float(np.abs(self.H_cross.data).sum())


def project_subdomain(h: StructuredMatrix, f, blocks: OverlapBlocks, k: int,
                      dense_limit: int = DENSE_BLOCK_LIMIT) -> SubdomainSystem:
    f = np.asarray(f, dtype=float)
    if f.shape != (h.n,):
        raise InputError(f"right-hand side has shape {f.shape}, expected ({h.n},)")
    if not h.symmetric:
        raise InputError("subdomain projection requires a symmetric matrix")
    block = np.asarray(blocks.blocks[k])
    rows = h.csr[block]
    inside = np.zeros(h.n, dtype=bool)
    inside[block] = True
    coo = rows.tocoo()
    keep = ~inside[coo.col]
    cross = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=rows.shape)
    cross.sort_indices()
    sub = rows[:, block].tocsr()
    sub.sort_indices()
    H_block = sub.toarray() if len(block) <= dense_limit else sub
    return SubdomainSystem(
        k=k,
        interior=np.asarray(blocks.interior[k]),
        block=block,
        H_block=H_block,
        H_cross=cross,
        H_rows=rows.tocsr(),
        f_block=f[block].copy(),
        restrict_rows=blocks.restrict_positions(k),
    )


def project_all(h, f, blocks, dense_limit=DENSE_BLOCK_LIMIT):
    return [project_subdomain(h, f, blocks, k, dense_limit) for k in range(blocks.k_blocks)]


def residual_inf(h: StructuredMatrix, x, f, row_set=None) -> float:
    """Infinity norm of ``Hx - f``, optionally over a subset of rows."""
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    if row_set is None:
        r = h.csr @ x - f
    else:
        row_set = np.asarray(row_set)
        if row_set.size == 0:
            return 0.0
        r = h.csr[row_set] @ x - f[row_set]
    return float(np.abs(r).max()) if r.size else 0.0
