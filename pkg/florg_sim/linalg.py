"""
Dense real-matrix kernels.

All matrices are C-ordered float64 numpy arrays. Functions are pure: inputs are
never modified and results are freshly allocated.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import numpy.typing as npt

from .errors import ContractViolation, NotPsdError
from . import mylogger

logger = mylogger.get_logger(__name__)

Matrix = npt.NDArray[np.float64]

JACOBI_MAX_SWEEPS = 100
SVD_ZERO_RATIO = 1e-12
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class EigenPair:
    """Eigenvalues in descending order; row i of `vectors` is the unit eigenvector of values[i]."""

    values: npt.NDArray[np.float64]
    vectors: Matrix


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD m = u @ diag(sigma) @ v.T with min(rows, cols) components."""

    u: Matrix
    sigma: npt.NDArray[np.float64]
    v: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.v.T


# ============================================================================
# VALIDATION
# ============================================================================

def as_matrix(x, name: str = "matrix") -> Matrix:
    """Coerce to a finite 2-D float64 array or raise ContractViolation."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def require_shape(m: Matrix, shape: tuple, name: str) -> None:
    if m.shape != tuple(shape):
        raise ContractViolation(f"{name} has shape {m.shape}, expected {tuple(shape)}")


def frobenius(m: Matrix) -> float:
    return float(np.linalg.norm(m, "fro")) if m.size else 0.0


# ============================================================================
# PRODUCTS AND ORTHONORMAL BASES
# ============================================================================

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard product a @ b with a shape contract."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"dimension mismatch: a is {a.shape[0]}x{a.shape[1]}, b is {b.shape[0]}x{b.shape[1]}")
    return a @ b


def orthonormalize_columns(m: Matrix) -> Matrix:
    """Q factor of m with the sign fixed so that diag(R) > 0 (unique for full column rank)."""
    q, r = np.linalg.qr(m, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray(q * signs)


def orthonormal_columns(rows: int, cols: int, seed: int) -> Matrix:
    """Haar-distributed rows x cols matrix with orthonormal columns (QR of a Gaussian)."""
    if rows < cols:
        raise ContractViolation(f"cannot build {rows}x{cols} semi-orthogonal matrix: rows < cols")
    if cols < 1:
        raise ContractViolation(f"cols must be positive, got {cols}")
    rng = np.random.default_rng(seed)
    return orthonormalize_columns(rng.standard_normal((rows, cols)))


def complete_orthonormal_basis(columns: list, dim: int, count: int) -> Matrix:
    """
    Extend `columns` (assumed orthonormal) to `count` orthonormal columns of length `dim`.

    Candidates are the axis vectors e_0, e_1, ... in order, Gram-Schmidt'ed twice
    against everything accepted so far, so the completion is deterministic.
    """
    basis = [np.asarray(c, dtype=np.float64) for c in columns]
    axis = 0
    while len(basis) < count:
        if axis >= dim:
            raise ContractViolation(f"cannot complete {count} orthonormal vectors in dimension {dim}")
        cand = np.zeros(dim)
        cand[axis] = 1.0
        axis += 1
        for _ in range(2):
            for b in basis:
                cand -= (b @ cand) * b
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            basis.append(cand / norm)
    if not basis:
        return np.zeros((dim, 0))
    return np.ascontiguousarray(np.stack(basis, axis=1))


# ============================================================================
# SYMMETRIC EIGENDECOMPOSITION (CYCLIC JACOBI)
# ============================================================================

def default_psd_tol(q: Matrix) -> float:
    n = q.shape[0]
    return 1e-10 * abs(float(np.trace(q))) / n if n else 0.0


def _jacobi(a: Matrix) -> tuple:
    """Cyclic Jacobi sweeps on a symmetric matrix; returns (diagonal, eigenvector columns)."""
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    scale = frobenius(a)
    if scale == 0.0 or n == 1:
        return np.diag(a).copy(), v
    threshold = np.finfo(np.float64).eps * scale * 1e-2
    for sweep in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= threshold:
            logger.debug(f"Jacobi converged after {sweep} sweeps (n={n})")
            break
        rotations = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                # Negligible against both diagonal entries: annihilate without rotating.
                if sweep > 3 and abs(a[p, p]) + 100.0 * abs(apq) == abs(a[p, p]) \
                        and abs(a[q, q]) + 100.0 * abs(apq) == abs(a[q, q]):
                    a[p, q] = a[q, p] = 0.0
                    continue
                rotations += 1
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
        if rotations == 0:
            break
    else:
        logger.warning(f"Jacobi hit {JACOBI_MAX_SWEEPS} sweeps without full convergence (n={n})")
    return np.diag(a).copy(), v


def sym_eig(q: Matrix, psd_tol: Optional[float] = None) -> EigenPair:
    """
    Eigendecomposition q = P^T diag(values) P of a symmetric PSD matrix.

    Eigenvalues below psd_tol are clamped to zero; anything below -psd_tol raises
    NotPsdError. psd_tol defaults to 1e-10 * |trace(q)| / dim.
    """
    q = as_matrix(q, "q")
    if q.shape[0] != q.shape[1]:
        raise ContractViolation(f"sym_eig needs a square matrix, got {q.shape[0]}x{q.shape[1]}")
    norm = frobenius(q)
    if frobenius(q - q.T) > SYMMETRY_TOL * norm:
        raise ContractViolation(f"sym_eig needs a symmetric matrix (asymmetry {frobenius(q - q.T):.3e})")
    tol = default_psd_tol(q) if psd_tol is None else float(psd_tol)
    if q.shape[0] == 0:
        return EigenPair(values=np.zeros(0), vectors=np.zeros((0, 0)))

    values, vecs = _jacobi(0.5 * (q + q.T))
    order = np.argsort(-values, kind="stable")
    values = values[order]
    rows = np.ascontiguousarray(vecs[:, order].T)

    if values.size and values[-1] < -tol:
        raise NotPsdError(float(values[-1]), tol)
    values = np.where(values < tol, 0.0, values)

    # Sign convention: the largest-magnitude entry of each eigenvector is positive.
    lead = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), lead])
    signs[signs == 0] = 1.0
    rows = rows * signs[:, None]
    return EigenPair(values=values, vectors=rows)


# ============================================================================
# THIN SVD
# ============================================================================

def _thin_svd_tall(m: Matrix) -> SvdResult:
    """Thin SVD for rows >= cols through the eigendecomposition of m^T m."""
    rows, cols = m.shape
    eig = sym_eig(m.T @ m)
    v = eig.vectors.T
    b = m @ v
    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    v = v[:, order]
    b = b[:, order]

    sigma_max = sigma[0] if sigma.size else 0.0
    positive = sigma > SVD_ZERO_RATIO * sigma_max if sigma_max > 0 else np.zeros(cols, dtype=bool)
    sigma = np.where(positive, sigma, 0.0)

    # Modified Gram-Schmidt, twice, on m v / sigma for the positive part keeps u
    # orthonormal to machine precision even when sigma is badly conditioned.
    accepted = []
    for j in np.flatnonzero(positive):
        u_j = b[:, j] / sigma[j]
        for _ in range(2):
            for prev in accepted:
                u_j = u_j - (prev @ u_j) * prev
        u_j = u_j / np.linalg.norm(u_j)
        accepted.append(u_j)
    u = complete_orthonormal_basis(accepted, rows, cols)
    return SvdResult(u=u, sigma=sigma, v=np.ascontiguousarray(v))


def thin_svd(m: Matrix) -> SvdResult:
    """Rank-revealing thin SVD with min(rows, cols) components, sigma descending."""
    m = as_matrix(m, "m")
    if m.shape[0] >= m.shape[1]:
        return _thin_svd_tall(m)
    t = _thin_svd_tall(np.ascontiguousarray(m.T))
    return SvdResult(u=t.v, sigma=t.sigma, v=t.u)
