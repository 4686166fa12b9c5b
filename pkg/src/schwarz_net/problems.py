"""Problem families: the generic graph QP and DC state estimation on synthetic networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, NotPositiveDefiniteError
from .graph import Graph
from .matrix import StructuredMatrix

DENSE_PD_CHECK = 4000


@dataclass
class GraphQPSpec:
    """Per-vertex and per-edge data of the node/edge QP.

    Edge arrays follow ``g.edges()`` order (low id first). ``a_off[e]`` is the
    symmetric coupling ``a_ij = a_ji`` of edge ``e``.
    """

    g: Graph
    q: np.ndarray
    r: np.ndarray
    f_lin: np.ndarray
    s: np.ndarray
    a_diag: np.ndarray
    a_off: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        n, m = self.g.n_vertices, self.g.n_edges
        for name, size in (("q", n), ("r", n), ("f_lin", n), ("a_diag", n),
                           ("s", m), ("a_off", m), ("b", m)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (size,):
                raise InputError(f"{name} must have length {size}, got shape {arr.shape}")
            setattr(self, name, arr)
        if np.any(self.q < 0) or np.any(self.r < 0) or np.any(self.s < 0):
            raise InputError("q, r and s must be nonnegative")


def ensure_positive_definite(h: StructuredMatrix, what="H"):
    """Raise ``NotPositiveDefiniteError`` with an eigenvalue estimate if ``h`` is not PD."""
    if h.n == 0:
        return
    if h.n <= DENSE_PD_CHECK:
        a = h.toarray()
        try:
            la.cholesky(a)
            return
        except la.LinAlgError:
            lam = float(la.eigvalsh(a, subset_by_index=[0, 0])[0])
    else:
        lam = float(spla.eigsh(h.csr, k=1, which="SA", return_eigenvectors=False)[0])
        if lam > 0:
            return
    raise NotPositiveDefiniteError(
        f"{what} not positive definite (smallest eigenvalue ~ {lam:.3e})", smallest_eigenvalue=lam)


def _edge_arrays(g):
    edges = np.array(g.edges(), dtype=np.int64).reshape(-1, 2)
    return edges[:, 0], edges[:, 1]


def incidence(g: Graph, weights) -> sp.csr_matrix:
    """Signed edge-vertex matrix: row ``e=(i,j)`` has ``+w_e`` at ``i`` and ``-w_e`` at ``j``."""
    src, dst = _edge_arrays(g)
    m = len(src)
    w = np.asarray(weights, dtype=float)
    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([src, dst])
    vals = np.concatenate([w, -w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, g.n_vertices))


def reduce_graph_qp(spec: GraphQPSpec):
    """Eliminate ``u = Ax`` and ``v = Bx`` to get ``(H, f)`` with ``H = Q + A'RA + B'SB``."""
    g = spec.g
    n = g.n_vertices
    src, dst = _edge_arrays(g)
    A = sp.coo_matrix(
        (np.concatenate([spec.a_diag, -spec.a_off, -spec.a_off]),
         (np.concatenate([np.arange(n), src, dst]), np.concatenate([np.arange(n), dst, src]))),
        shape=(n, n)).tocsr()
    B = incidence(g, spec.b)
    H = sp.diags(spec.q) + A.T @ sp.diags(spec.r) @ A + B.T @ sp.diags(spec.s) @ B
    H = (H + H.T) / 2
    h = StructuredMatrix(H, symmetric=True)
    ensure_positive_definite(h)
    return h, spec.f_lin.copy()


def generate_network(kind="lattice2d", *, rows=None, cols=None, n=None, chords=0,
                     y_range=(1.0, 10.0), seed=0):
    """Connected synthetic network and per-edge susceptances drawn from ``y_range``.

    ``kind="lattice2d"`` needs ``rows`` and ``cols``;
    ``kind="random_tree_plus_chords"`` needs ``n`` and ``chords``.
    """
    rng = np.random.default_rng(seed)
    if kind == "lattice2d":
        if not rows or not cols or rows < 1 or cols < 1:
            raise InputError("lattice2d needs rows >= 1 and cols >= 1")
        idx = lambda r, c: r * cols + c  # noqa: E731
        edges = [(idx(r, c), idx(r, c + 1)) for r in range(rows) for c in range(cols - 1)]
        edges += [(idx(r, c), idx(r + 1, c)) for r in range(rows - 1) for c in range(cols)]
        g = Graph.from_edges(rows * cols, edges)
    elif kind == "random_tree_plus_chords":
        if not n or n < 1:
            raise InputError("random_tree_plus_chords needs n >= 1")
        max_chords = n * (n - 1) // 2 - (n - 1)
        if chords > max_chords:
            raise InputError(f"at most {max_chords} chords fit on {n} vertices")
        edges = {(int(rng.integers(i)), i) for i in range(1, n)}
        while len(edges) < n - 1 + chords:
            i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
            edges.add((i, j))
        g = Graph.from_edges(n, sorted(edges))
    else:
        raise InputError(f"unknown network kind {kind!r}")
    lo, hi = y_range
    if not 0 < lo <= hi:
        raise InputError("y_range must satisfy 0 < lo <= hi")
    y = rng.uniform(lo, hi, size=g.n_edges)
    return g, y


@dataclass
class EstimationProblem:
    g: Graph
    y: np.ndarray
    measured: np.ndarray
    P_m: np.ndarray
    delta_m: np.ndarray
    c: float
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.c <= 0:
            raise InputError("prior weight c must be positive")
        self.y = np.asarray(self.y, dtype=float)
        self.measured = np.asarray(self.measured, dtype=bool)
        self.P_m = np.asarray(self.P_m, dtype=float)
        self.delta_m = np.asarray(self.delta_m, dtype=float)
        if np.any(self.y <= 0):
            raise InputError("susceptances must be positive")

    @property
    def sigma_P(self):
        return np.where(self.measured, self.y, np.sqrt(10.0) * self.y)

    @property
    def sigma_delta(self):
        return np.full(self.g.n_vertices, 1.0 / self.c)

    def flow_matrix(self):
        """``Y`` with ``P = Y delta``."""
        return incidence(self.g, self.y)

    def objective(self, delta):
        """MAP objective with ``P = Y delta`` eliminated."""
        P = self.flow_matrix() @ delta
        a = (delta - self.delta_m) / self.sigma_delta
        b = (P - self.P_m) / self.sigma_P
        return float(a @ a + b @ b)


def _smooth_field(g, rng, steps=20):
    x = rng.normal(size=g.n_vertices)
    deg = np.array([max(g.degree(i), 1) for i in range(g.n_vertices)], dtype=float)
    for _ in range(steps):
        nb = np.array([x[g.adjacency[i]].sum() if g.degree(i) else x[i]
                       for i in range(g.n_vertices)])
        x = 0.5 * x + 0.5 * nb / deg
    x -= x.mean()
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x


def simulate_measurements(g: Graph, y, c, measured_fraction=0.5, noise_seed=0,
                          truth_mode="random_smooth", angle_scale=0.3, noise=True):
    """Draw true angles, flows and noisy measurements for a DC network."""
    if not 0 < measured_fraction <= 1:
        raise InputError("measured_fraction must be in (0, 1]")
    if c <= 0:
        raise InputError("c must be positive")
    rng = np.random.default_rng(noise_seed)
    m = g.n_edges
    measured = np.zeros(m, dtype=bool)
    measured[rng.choice(m, size=int(round(measured_fraction * m)), replace=False)] = True
    if truth_mode == "random_smooth":
        truth = angle_scale * _smooth_field(g, rng)
    elif truth_mode == "zero":
        truth = np.zeros(g.n_vertices)
    else:
        raise InputError(f"unknown truth mode {truth_mode!r}")
    y = np.asarray(y, dtype=float)
    P = incidence(g, y) @ truth
    sigma_P = np.where(measured, y, np.sqrt(10.0) * y)
    P_m = P + (rng.normal(size=m) * sigma_P if noise else 0.0)
    delta_m = truth + (rng.normal(size=g.n_vertices) / c if noise else 0.0)
    return EstimationProblem(g, y, measured, P_m, delta_m, float(c), truth)


def build_estimation_system(p: EstimationProblem):
    """Normal equations of the MAP problem: ``H = S_d + Y' S_P Y``, ``f = Y' S_P P_m + S_d d_m``.

    ``S_d`` and ``S_P`` are inverse-variance weights.
    """
    Y = p.flow_matrix()
    w_delta = 1.0 / p.sigma_delta ** 2
    w_P = 1.0 / p.sigma_P ** 2
    H = sp.diags(w_delta) + Y.T @ sp.diags(w_P) @ Y
    f = Y.T @ (w_P * p.P_m) + w_delta * p.delta_m
    H = (H + H.T) / 2
    return StructuredMatrix(H, symmetric=True), np.asarray(f).ravel()


def estimation_instance(rows=30, cols=30, c=0.1, seed=0, y_range=(1.0, 10.0),
                        angle_scale=0.3):
    """Lattice network plus simulated measurements in one call."""
    g, y = generate_network("lattice2d", rows=rows, cols=cols, y_range=y_range, seed=seed)
    return simulate_measurements(g, y, c, noise_seed=seed + 1, angle_scale=angle_scale)
