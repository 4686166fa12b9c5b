"""Eigenvalue intervals, inverse-decay bounds and iteration-matrix diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from .errors import InputError, NotCertifiableError, NotPositiveDefiniteError
from .graph import Graph, OverlapBlocks, all_pairs_distance
from .matrix import (StructuredMatrix, SubdomainSystem, _max_pair_distance, bandwidth,
                     block_bandwidth, project_all)

EXACT_LIMIT = 1024
DIAGNOSTIC_LIMIT = 2048


@dataclass(frozen=True)
class EigenInterval:
    lambda_min: float
    lambda_max: float
    method: str
    certified: bool = True

    def __post_init__(self):
        if not (0 < self.lambda_min <= self.lambda_max):
            raise NotPositiveDefiniteError(
                f"eigenvalue interval [{self.lambda_min}, {self.lambda_max}] is not positive",
                smallest_eigenvalue=self.lambda_min)

    @property
    def lambda_mid(self):
        return 0.5 * (self.lambda_min + self.lambda_max)

    @property
    def contraction(self):
        """``(lmax - lmin) / (lmax + lmin)``, the decay base."""
        return (self.lambda_max - self.lambda_min) / (self.lambda_max + self.lambda_min)


def _as_matrix(obj):
    if isinstance(obj, SubdomainSystem):
        return obj.H_block
    if isinstance(obj, StructuredMatrix):
        return obj.csr
    return obj


def eigen_interval(obj, method="auto", tol=1e-8) -> EigenInterval:
    """Interval containing the spectrum of a symmetric PD matrix or block.

    ``method`` is ``exact_dense``, ``gershgorin``, ``lanczos_estimated`` or
    ``auto`` (exact up to 1024 rows, Lanczos above).
    """
    a = _as_matrix(obj)
    n = a.shape[0]
    if method == "auto":
        method = "exact_dense" if n <= EXACT_LIMIT else "lanczos_estimated"
    if method == "exact_dense":
        dense = a if isinstance(a, np.ndarray) else a.toarray()
        w = la.eigvalsh(dense)
        if w[0] <= 0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite (smallest eigenvalue {w[0]:.3e})",
                smallest_eigenvalue=float(w[0]))
        return EigenInterval(float(w[0]), float(w[-1]), "exact_dense")
    if method == "gershgorin":
        absa = np.abs(a) if isinstance(a, np.ndarray) else abs(a)
        rowsum = np.asarray(absa.sum(axis=1)).ravel()
        diag = a.diagonal()
        off = rowsum - np.abs(diag)
        lo = float(np.min(diag - off))
        hi = float(np.max(diag + off))
        if lo <= 0:
            raise NotCertifiableError(
                f"Gershgorin lower bound {lo:.3e} is not positive; use method='exact_dense'")
        return EigenInterval(lo, hi, "gershgorin")
    if method == "lanczos_estimated":
        if n < 3:
            return eigen_interval(obj, "exact_dense")
        hi = spla.eigsh(a, k=1, which="LA", tol=tol, return_eigenvectors=False)[0]
        lo = spla.eigsh(a, k=1, which="SA", tol=tol, return_eigenvectors=False)[0]
        if lo <= 0:
            raise NotPositiveDefiniteError(
                f"Lanczos estimate of smallest eigenvalue is {lo:.3e}", smallest_eigenvalue=float(lo))
        return EigenInterval(float(lo), float(hi), "lanczos_estimated", certified=False)
    raise InputError(f"unknown eigenvalue method {method!r}")


def _decay(base, distance, bw):
    """``base ** (distance / bw)`` with ``d/0 = +inf`` for ``d > 0``."""
    if bw == 0:
        return 1.0 if distance == 0 else 0.0
    if math.isinf(distance):
        return 0.0
    return base ** (distance / bw)


def inverse_decay_bound(h: StructuredMatrix, g: Graph, eig: EigenInterval, i: int, j: int,
                        bw: int | None = None, distance: float | None = None) -> float:
    """Upper bound on ``|(H^-1)_ij|`` decaying geometrically with graph distance."""
    if eig.lambda_min <= 0:
        raise NotPositiveDefiniteError("decay bound needs a positive definite matrix; "
                                       "use theorem4_check for general matrices")
    if bw is None:
        bw = bandwidth(h, g)
    if distance is None:
        from .graph import bfs_distance
        distance = float(bfs_distance(g, [i])[j])
    return _decay(eig.contraction, distance, bw) / eig.lambda_min


def inverse_decay_matrix(h: StructuredMatrix, g: Graph, eig: EigenInterval, bw=None, dist=None):
    """Entrywise decay bound for every ``(i, j)`` at once (small problems)."""
    if bw is None:
        bw = bandwidth(h, g)
    if dist is None:
        dist = all_pairs_distance(g)[: h.n, : h.n]
    if bw == 0:
        out = np.where(dist == 0, 1.0, 0.0)
    else:
        with np.errstate(over="ignore", under="ignore"):
            out = np.where(np.isfinite(dist), eig.contraction ** (dist / bw), 0.0)
    return out / eig.lambda_min


@dataclass
class BlockBound:
    k: int
    R: float
    eig: EigenInterval
    bw: int
    block_bound: float
    bw_cross: int = 0

    @property
    def bw_effective(self):
        return max(self.bw, self.bw_cross)


@dataclass
class RateBound:
    per_block: list
    alpha: float
    simplified_alpha: float
    valid: bool
    certified: bool
    global_eig: EigenInterval | None = None
    global_bw: int | None = None
    omega: int = 0

    def to_json(self):
        return {
            "omega": self.omega,
            "alpha": self.alpha,
            "simplified_alpha": self.simplified_alpha,
            "valid": self.valid,
            "certified": self.certified,
            "global_bandwidth": self.global_bw,
            "blocks": [
                {"k": b.k, "R_k": b.R, "lambda_min": b.eig.lambda_min, "lambda_max": b.eig.lambda_max,
                 "eig_method": b.eig.method, "bandwidth": b.bw, "cross_bandwidth": b.bw_cross,
                 "block_bound": b.block_bound}
                for b in self.per_block
            ],
        }


def block_rate(R, eig: EigenInterval, omega, bw):
    """Per-block factor ``R/lmin * q**((omega+1)/bw - 1)``.

    A zero-bandwidth (diagonal) block has a diagonal inverse, so only the
    ``R/lmin`` prefactor survives.
    """
    if R == 0:
        return 0.0
    if bw == 0:
        return R / eig.lambda_min
    q = eig.contraction
    expo = (omega + 1) / bw - 1
    if q == 0:
        return R / eig.lambda_min if expo <= 0 else 0.0
    return R / eig.lambda_min * q ** expo


def cross_bandwidth(g: Graph, sub: SubdomainSystem) -> int:
    """Largest graph distance spanned by a nonzero of the block's boundary coupling."""
    if sub.H_cross.nnz == 0:
        return 0
    return _max_pair_distance(g, sub.H_cross, sub.block, None)


def rate_bound(h: StructuredMatrix, g: Graph, blocks: OverlapBlocks, eig_method="auto",
               subsystems=None, global_eig=None) -> RateBound:
    """Certified bound on the infinity norm of the synchronous iteration matrix."""
    if subsystems is None:
        subsystems = project_all(h, np.zeros(h.n), blocks)
    omega = blocks.omega
    per_block = []
    for sub in subsystems:
        R = sub.coupling_strength()
        eig = eigen_interval(sub, eig_method)
        bw = block_bandwidth(h, g, sub.block)
        # distance of the couplings leaving the block; the decay exponent must
        # use a bandwidth that also covers these, otherwise the bound can fail
        bw_cross = cross_bandwidth(g, sub)
        rate = block_rate(R, eig, omega, max(bw, bw_cross))
        per_block.append(BlockBound(sub.k, R, eig, bw, rate, bw_cross))
    alpha = max(b.block_bound for b in per_block)
    certified = all(b.eig.certified for b in per_block)
    if global_eig is None:
        global_eig = eigen_interval(h, eig_method)
    gbw = bandwidth(h, g)
    simplified = block_rate(max(b.R for b in per_block), global_eig, omega, gbw)
    return RateBound(per_block, alpha, simplified, alpha < 1, certified, global_eig, gbw, omega)


@dataclass
class IterationMatrices:
    S: np.ndarray
    U: np.ndarray
    spectral_radius: float
    inf_norm: float


def build_iteration_matrices(h: StructuredMatrix, f, blocks: OverlapBlocks,
                             subsystems=None) -> IterationMatrices:
    """Dense ``S`` and ``U`` of the synchronous map ``x <- S x + U f`` (diagnostic)."""
    n = h.n
    if n > DIAGNOSTIC_LIMIT:
        raise InputError(f"dense iteration matrices limited to n <= {DIAGNOSTIC_LIMIT}")
    if subsystems is None:
        subsystems = project_all(h, f, blocks, dense_limit=n)
    S = np.zeros((n, n))
    U = np.zeros((n, n))
    for sub in subsystems:
        try:
            c = la.cho_factor(sub.dense_block())
        except la.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"block {sub.k} is not positive definite",
                                           block=sub.k) from exc
        inv = la.cho_solve(c, np.eye(sub.size))
        rows = inv[sub.restrict_rows]
        U[np.ix_(sub.interior, sub.block)] = rows
        S[sub.interior] = -(sub.H_cross.T @ rows.T).T
    radius = float(np.max(np.abs(la.eigvals(S)))) if n else 0.0
    norm = float(np.abs(S).sum(axis=1).max()) if n else 0.0
    return IterationMatrices(S, U, radius, norm)


@dataclass
class SpectralDisk:
    center: complex
    radius: float
    epsilon: float
    C_fit: float | None = None

    def __post_init__(self):
        if not self.radius < abs(self.center):
            raise InputError("disk radius must be smaller than |center|")
        if not 0 < self.epsilon < 1 - self.radius / abs(self.center):
            raise InputError("epsilon must lie in (0, 1 - radius/|center|)")

    @property
    def base(self):
        return self.radius / abs(self.center) + self.epsilon


def disk_for(m, epsilon_fraction=0.5, center=None):
    """Smallest disk around ``center`` (default: spectrum mean) containing the spectrum."""
    a = m.toarray() if isinstance(m, StructuredMatrix) else np.asarray(m)
    w = la.eigvals(a)
    z = complex(np.mean(w)) if center is None else complex(center)
    radius = float(np.max(np.abs(w - z)))
    if radius == 0:
        radius = 1e-12 * abs(z)
    eps = epsilon_fraction * (1 - radius / abs(z))
    return SpectralDisk(z, radius, eps)


@dataclass
class Theorem4Report:
    C_fit: float
    decay_ok: bool
    max_ratio: float
    powers_checked: int
    violations: int = 0
    bound: np.ndarray = field(default=None, repr=False)


def theorem4_check(m, g: Graph, disk: SpectralDisk, m_max: int = 64, tol=1e-12) -> Theorem4Report:
    """Fit the power-growth constant and check the resulting inverse decay bound.

    ``C`` is the smallest constant with ``|((I - m/z)^p)_ij| <= C * base**p``
    for ``p = 0..m_max``; ``p = 0`` is included because the diagonal of the
    inverse series starts at the identity term.
    """
    mat = m if isinstance(m, StructuredMatrix) else StructuredMatrix(m, symmetric=False)
    a = mat.toarray()
    n = a.shape[0]
    if n > 512:
        raise InputError("theorem4_check is limited to n <= 512")
    w = la.eigvals(a)
    if np.any(np.abs(w - disk.center) > disk.radius * (1 + 1e-10)):
        raise InputError("matrix has eigenvalues outside the given disk")
    z = disk.center
    X = np.eye(n) - a / z
    base = disk.base
    C = 1.0
    P = np.eye(n, dtype=complex)
    for p in range(1, m_max + 1):
        P = P @ X
        C = max(C, float(np.abs(P).max()) / base ** p)
    bw = bandwidth(mat, g)
    dist = all_pairs_distance(g)[:n, :n]
    if bw == 0:
        decay = np.where(dist == 0, 1.0, 0.0)
    else:
        with np.errstate(under="ignore"):
            decay = np.where(np.isfinite(dist), base ** (dist / bw), 0.0)
    bound = C / ((1 - disk.epsilon) * abs(z) - disk.radius) * decay
    inv = np.abs(la.inv(a))
    excess = inv - bound
    violations = int(np.count_nonzero(excess > tol * max(1.0, float(inv.max()))))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, inv / bound, np.where(inv > 0, np.inf, 0.0))
    disk.C_fit = C
    return Theorem4Report(C, violations == 0, float(ratio.max()), m_max, violations, bound)
