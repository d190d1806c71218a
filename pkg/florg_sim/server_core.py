"""
Server side of FLoRG.

Pipeline per layer and round:
    aggregate_gram -> decompose -> truncate_factor -> procrustes_align -> assemble_full
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .adapter import AdapterState, delta_w
from .errors import AggregationError, ContractViolation, DivergenceError, NotPsdError
from .linalg import EigenPair, Matrix, as_matrix, frobenius, require_shape, sym_eig, thin_svd
from . import mylogger

logger = mylogger.get_logger(__name__)

SIGMA_DEFINED_THRESHOLD = 1e-8


@dataclass(frozen=True)
class GramAggregate:
    q: Matrix
    eigen: EigenPair
    effective_rank: int
    psd_tol: float
    num_clients: int
    rank_bound: int


@dataclass(frozen=True)
class CanonicalFactor:
    """Rows are sqrt(lambda_j) * p_j for the retained eigenpairs, largest first."""

    a_tilde: Matrix
    eigenvalues: np.ndarray
    truncation_loss: float = 0.0

    @property
    def rank(self) -> int:
        return self.a_tilde.shape[0]


@dataclass(frozen=True)
class ProcrustesResult:
    s_star: Matrix
    s_applied: Matrix
    a_next: Matrix
    residual: float
    optimal_residual: float
    delta_proc: float
    sigma_min_cross: float

    @property
    def alignment_bound_defined(self) -> bool:
        return self.sigma_min_cross > SIGMA_DEFINED_THRESHOLD


@dataclass(frozen=True)
class ServerRoundReport:
    aggregate: GramAggregate
    factor: CanonicalFactor
    alignment: ProcrustesResult
    gram_preservation_err: float
    server_flops: int

    @property
    def a_next(self) -> Matrix:
        return self.alignment.a_next


# ============================================================================
# AGGREGATION
# ============================================================================

def uniform_weights(n: int) -> List[float]:
    if n < 1:
        raise ContractViolation("at least one client is required")
    return [1.0 / n] * n


def check_weights(weights: Sequence[float], n: int) -> List[float]:
    weights = [float(w) for w in weights]
    if len(weights) != n:
        raise ContractViolation(f"{len(weights)} weights for {n} clients")
    if any(w < 0 or not np.isfinite(w) for w in weights):
        raise ContractViolation(f"weights must be finite and non-negative: {weights}")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ContractViolation(f"weights must sum to 1, got {sum(weights)!r}")
    return weights


def aggregate_gram(locals_: Sequence[Matrix], weights: Optional[Sequence[float]] = None) -> GramAggregate:
    """q = sum_n w_n A_n^T A_n, reduced in client-index order."""
    if not locals_:
        raise ContractViolation("aggregate_gram needs at least one client matrix")
    mats = [np.asarray(a, dtype=np.float64) for a in locals_]
    shape = mats[0].shape
    for idx, a in enumerate(mats):
        if a.ndim != 2 or a.shape != shape:
            raise ContractViolation(f"client {idx} uploaded shape {a.shape}, expected {shape}")
    weights = uniform_weights(len(mats)) if weights is None else check_weights(weights, len(mats))
    r, k = shape

    q = np.zeros((k, k))
    with np.errstate(over="ignore", invalid="ignore"):
        for w, a in zip(weights, mats):
            q += w * (a.T @ a)
    if not np.all(np.isfinite(q)):
        raise DivergenceError("aggregated Gram matrix has non-finite entries")

    psd_tol = 1e-10 * float(np.trace(q)) / k
    try:
        eigen = sym_eig(q, psd_tol)
    except (NotPsdError, ContractViolation) as e:
        raise AggregationError(f"aggregated Gram matrix failed the PSD check: {e}") from e
    effective_rank = int(np.count_nonzero(eigen.values > psd_tol))
    rank_bound = min(k, len(mats) * r)
    if effective_rank > rank_bound:
        raise AggregationError(f"effective rank {effective_rank} exceeds min(k, N*r) = {rank_bound}")
    return GramAggregate(
        q=q, eigen=eigen, effective_rank=effective_rank, psd_tol=psd_tol,
        num_clients=len(mats), rank_bound=rank_bound,
    )


def gram_aggregation_error(locals_: Sequence[Matrix], weights: Sequence[float], agg: GramAggregate) -> float:
    """Distance between the server aggregate and the weighted mean of client Grams."""
    reference = sum(w * (np.asarray(a).T @ np.asarray(a)) for w, a in zip(weights, locals_))
    return frobenius(agg.q - reference)


# ============================================================================
# DECOMPOSITION
# ============================================================================

def decompose(agg: GramAggregate) -> CanonicalFactor:
    """Canonical square root Lambda^{1/2} P over the effective_rank leading eigenpairs."""
    rp = agg.effective_rank
    values = agg.eigen.values[:rp]
    a_tilde = np.sqrt(values)[:, None] * agg.eigen.vectors[:rp]
    return CanonicalFactor(a_tilde=np.ascontiguousarray(a_tilde), eigenvalues=values.copy())


def truncate_factor(factor: CanonicalFactor, target_r: int) -> CanonicalFactor:
    """Keep the target_r highest-energy rows; the dropped eigenvalue mass is the truncation loss."""
    if target_r < 1:
        raise ContractViolation(f"target rank must be positive, got {target_r}")
    if factor.rank <= target_r:
        return factor
    dropped = float(np.sum(factor.eigenvalues[target_r:]))
    return CanonicalFactor(
        a_tilde=np.ascontiguousarray(factor.a_tilde[:target_r]),
        eigenvalues=factor.eigenvalues[:target_r].copy(),
        truncation_loss=factor.truncation_loss + dropped,
    )


# ============================================================================
# PROCRUSTES ALIGNMENT
# ============================================================================

def alignment_residual(a_prev: Matrix, a_tilde: Matrix, s: Matrix) -> float:
    """||S A~ - A_prev||_F^2"""
    diff = s @ a_tilde - a_prev
    return float(np.sum(diff * diff))


def identity_alignment(r: int, r_prime: int) -> Matrix:
    """The trivial feasible alignment: I_{r'} padded with zero rows to r x r'."""
    if r_prime > r:
        raise ContractViolation(f"no feasible r x r' alignment for r={r} < r'={r_prime}")
    return np.eye(r, r_prime)


def _optimal_alignment(a_prev: Matrix, a_tilde: Matrix) -> tuple:
    r = a_prev.shape[0]
    r_prime = a_tilde.shape[0]
    if r_prime == 0:
        return np.zeros((r, 0)), 0.0
    m = a_prev @ a_tilde.T
    svd = thin_svd(m)
    s_star = svd.u @ svd.v.T
    positive = svd.sigma[svd.sigma > 0]
    sigma_min = float(positive[-1]) if positive.size else 0.0
    return s_star, sigma_min


def procrustes_align(a_prev: Matrix, factor: CanonicalFactor) -> ProcrustesResult:
    """
    Solve min_S ||S A~ - A_prev||_F s.t. S^T S = I with S* = U V^T from the SVD
    of A_prev A~^T. Rank-deficient cross matrices use the deterministic basis
    completion of thin_svd.
    """
    a_prev = as_matrix(a_prev, "a_prev")
    a_tilde = factor.a_tilde
    if a_prev.shape[1] != a_tilde.shape[1]:
        raise ContractViolation(f"a_prev has {a_prev.shape[1]} columns, factor has {a_tilde.shape[1]}")
    s_star, sigma_min = _optimal_alignment(a_prev, a_tilde)
    residual = alignment_residual(a_prev, a_tilde, s_star)
    if factor.rank > 0 and sigma_min == 0.0:
        logger.warning(
            f"cross matrix is zero; alignment is the degenerate-SVD default (residual {residual:.6e})"
        )
    return ProcrustesResult(
        s_star=s_star,
        s_applied=s_star,
        a_next=np.ascontiguousarray(s_star @ a_tilde),
        residual=residual,
        optimal_residual=residual,
        delta_proc=0.0,
        sigma_min_cross=sigma_min,
    )


def apply_alignment(a_prev: Matrix, factor: CanonicalFactor, s: Matrix) -> ProcrustesResult:
    """Use an arbitrary feasible S and report its drift Delta_proc against the optimum."""
    optimal = procrustes_align(a_prev, factor)
    s = np.asarray(s, dtype=np.float64)
    require_shape(s, optimal.s_star.shape, "s")
    residual = alignment_residual(a_prev, factor.a_tilde, s)
    return replace(
        optimal,
        s_applied=s,
        a_next=np.ascontiguousarray(s @ factor.a_tilde),
        residual=residual,
        delta_proc=max(residual - optimal.residual, 0.0),
    )


# ============================================================================
# REASSEMBLY AND FULL PIPELINE
# ============================================================================

def assemble_full(state: AdapterState, a_next: Matrix) -> Matrix:
    """W0 + (alpha / r) L a_next^T a_next R."""
    return state.w0 + delta_w(state.with_a(a_next))


def server_flops(num_clients: int, r: int, k: int, r_prime: int) -> int:
    """Operation count of aggregation, eigendecomposition and alignment for one layer."""
    aggregation = num_clients * r * k * k
    eig = k ** 3
    align = k * r * r_prime + min(r, r_prime) ** 2 * max(r, r_prime)
    return int(aggregation + eig + align)


def server_update(
    a_prev: Matrix,
    locals_: Sequence[Matrix],
    weights: Optional[Sequence[float]] = None,
    target_r: Optional[int] = None,
    align: bool = True,
) -> ServerRoundReport:
    """One FLoRG server step for one layer: aggregate, decompose, truncate, align."""
    r = a_prev.shape[0]
    target_r = r if target_r is None else target_r
    agg = aggregate_gram(locals_, weights)
    factor = truncate_factor(decompose(agg), target_r)
    if align:
        result = procrustes_align(a_prev, factor)
    else:
        result = apply_alignment(a_prev, factor, identity_alignment(r, factor.rank))

    q_norm = frobenius(agg.q)
    gram_err = frobenius(result.a_next.T @ result.a_next - agg.q)
    gram_err = gram_err / q_norm if q_norm > 0 else gram_err
    if factor.truncation_loss > 0:
        logger.debug(f"truncated r'={agg.effective_rank} -> {factor.rank}, loss {factor.truncation_loss:.6e}")
    return ServerRoundReport(
        aggregate=agg,
        factor=factor,
        alignment=result,
        gram_preservation_err=gram_err,
        server_flops=server_flops(agg.num_clients, r, a_prev.shape[1], agg.effective_rank),
    )
