"""
Two-matrix LoRA federation baselines: FedIT, FeDeRA, FFA-LoRA, FedSA-LoRA and
FedEx-LoRA, plus the factor-averaging bias that FLoRG's Gram aggregation avoids.

All baselines share delta_W = (alpha / r) * b @ a, the b = 0 / Gaussian-a
initialization, and fixed client-order reductions.
"""

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, DivergenceError
from .linalg import Matrix, as_matrix, frobenius, require_shape, thin_svd
from .server_core import check_weights, uniform_weights


class SchemeId(str, Enum):
    FLORG = "florg"
    FEDIT = "fedit"
    FEDERA = "federa"
    FFA_LORA = "ffa_lora"
    FEDSA_LORA = "fedsa_lora"
    FEDEX_LORA = "fedex_lora"


@dataclass(frozen=True)
class LoraState:
    w0: Matrix
    b: Matrix
    a: Matrix
    alpha: float
    r: int

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def delta_w(self) -> Matrix:
        return self.scale * (self.b @ self.a)

    def full_weight(self) -> Matrix:
        return self.w0 + self.delta_w()

    def with_factors(self, b: Optional[Matrix] = None, a: Optional[Matrix] = None) -> "LoraState":
        return dataclasses.replace(
            self,
            b=self.b if b is None else np.ascontiguousarray(b),
            a=self.a if a is None else np.ascontiguousarray(a),
        )


def init_lora(w0: Matrix, r: int, alpha: float, seed: int) -> LoraState:
    """b = 0 and a ~ N(0, 1/d_in), so delta_W starts at zero."""
    w0 = as_matrix(w0, "w0")
    d_out, d_in = w0.shape
    if not 1 <= r <= min(d_out, d_in):
        raise ContractViolation(f"LoRA rank r={r} outside [1, {min(d_out, d_in)}]")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(r, d_in))
    w0 = w0.copy()
    w0.flags.writeable = False
    return LoraState(w0=w0, b=np.zeros((d_out, r)), a=a, alpha=float(alpha), r=int(r))


# ============================================================================
# LOCAL TRAINING
# ============================================================================

def lora_grads(state: LoraState, g_full: Matrix) -> Tuple[Matrix, Matrix]:
    """(grad_b, grad_a) = ((alpha/r) G a^T, (alpha/r) b^T G)."""
    g_full = np.asarray(g_full, dtype=np.float64)
    require_shape(g_full, state.w0.shape, "g_full")
    return state.scale * (g_full @ state.a.T), state.scale * (state.b.T @ g_full)


def _checked(m: Matrix, what: str, round_idx: Optional[int], client_id: Optional[int]) -> Matrix:
    if not np.all(np.isfinite(m)):
        raise DivergenceError(f"non-finite {what}", round_idx=round_idx, client_id=client_id)
    return m


def lora_step(
    state: LoraState, g_full: Matrix, eta: float,
    round_idx: Optional[int] = None, client_id: Optional[int] = None,
) -> LoraState:
    """Plain SGD on both factors."""
    if eta < 0:
        raise ContractViolation(f"learning rate must be non-negative, got {eta}")
    with np.errstate(over="ignore", invalid="ignore"):
        grad_b, grad_a = lora_grads(state, g_full)
        b = _checked(state.b - eta * grad_b, "LoRA factor b", round_idx, client_id)
        a = _checked(state.a - eta * grad_a, "LoRA factor a", round_idx, client_id)
    return state.with_factors(b=b, a=a)


def ffa_step(
    state: LoraState, g_full: Matrix, eta: float,
    round_idx: Optional[int] = None, client_id: Optional[int] = None,
) -> LoraState:
    """FFA-LoRA: a stays frozen at its initialization, only b moves."""
    if eta < 0:
        raise ContractViolation(f"learning rate must be non-negative, got {eta}")
    with np.errstate(over="ignore", invalid="ignore"):
        grad_b, _ = lora_grads(state, g_full)
        b = _checked(state.b - eta * grad_b, "LoRA factor b", round_idx, client_id)
    return state.with_factors(b=b)


# ============================================================================
# AGGREGATION RULES
# ============================================================================

def _weights(states: Sequence[LoraState], weights: Optional[Sequence[float]]) -> List[float]:
    if not states:
        raise ContractViolation("aggregation needs at least one client state")
    shape_b, shape_a = states[0].b.shape, states[0].a.shape
    for idx, s in enumerate(states):
        if s.b.shape != shape_b or s.a.shape != shape_a:
            raise ContractViolation(
                f"client {idx} has factors {s.b.shape}/{s.a.shape}, expected {shape_b}/{shape_a}"
            )
    return uniform_weights(len(states)) if weights is None else check_weights(weights, len(states))


def _mean(mats: Sequence[Matrix], weights: Sequence[float]) -> Matrix:
    acc = np.zeros_like(mats[0])
    for w, m in zip(weights, mats):
        acc += w * m
    return acc


def mean_product(states: Sequence[LoraState], weights: Optional[Sequence[float]] = None) -> Matrix:
    weights = _weights(states, weights)
    return _mean([s.b @ s.a for s in states], weights)


def fedit_aggregate(states: Sequence[LoraState], weights: Optional[Sequence[float]] = None) -> LoraState:
    """Average b and a separately."""
    weights = _weights(states, weights)
    return states[0].with_factors(
        b=_mean([s.b for s in states], weights),
        a=_mean([s.a for s in states], weights),
    )


def federa_aggregate(
    states: Sequence[LoraState], target_r: int, weights: Optional[Sequence[float]] = None,
) -> LoraState:
    """Average the products and re-factor the top target_r singular triplets, Sigma split evenly."""
    if target_r < 1:
        raise ContractViolation(f"target rank must be positive, got {target_r}")
    p_bar = mean_product(states, weights)
    svd = thin_svd(p_bar)
    keep = min(target_r, svd.sigma.size)
    root = np.sqrt(svd.sigma[:keep])
    b = svd.u[:, :keep] * root
    a = root[:, None] * svd.v[:, :keep].T
    if keep < target_r:
        b = np.hstack([b, np.zeros((b.shape[0], target_r - keep))])
        a = np.vstack([a, np.zeros((target_r - keep, a.shape[1]))])
    return states[0].with_factors(b=b, a=a)


def ffa_aggregate(states: Sequence[LoraState], weights: Optional[Sequence[float]] = None) -> LoraState:
    """Average b only; every client shares the same frozen a."""
    weights = _weights(states, weights)
    return states[0].with_factors(b=_mean([s.b for s in states], weights))


def fedsa_aggregate(
    states: Sequence[LoraState], weights: Optional[Sequence[float]] = None,
) -> List[LoraState]:
    """Share a (averaged) and keep each client's b local."""
    weights = _weights(states, weights)
    a_global = _mean([s.a for s in states], weights)
    return [s.with_factors(a=a_global.copy()) for s in states]


def fedex_aggregate(
    states: Sequence[LoraState], weights: Optional[Sequence[float]] = None,
) -> Tuple[LoraState, Matrix]:
    """
    FedIT averages plus the residual mean(b_n a_n) - b_bar a_bar. The residual is in
    product units; the caller folds (alpha / r) * residual into the frozen weight.
    """
    weights = _weights(states, weights)
    avg = fedit_aggregate(states, weights)
    residual = _mean([s.b @ s.a for s in states], weights) - avg.b @ avg.a
    return avg, residual


def fold_residual(state: LoraState, residual: Matrix) -> LoraState:
    """Move the FedEx residual into the frozen weight so client math is unchanged."""
    w0 = state.w0 + state.scale * residual
    w0.flags.writeable = False
    return dataclasses.replace(state, w0=w0)


def aggregation_error(states: Sequence[LoraState], weights: Optional[Sequence[float]] = None) -> float:
    """||mean(b) mean(a) - mean(b a)||_F, the bias of averaging LoRA factors separately."""
    weights = _weights(states, weights)
    b_bar = _mean([s.b for s in states], weights)
    a_bar = _mean([s.a for s in states], weights)
    return frobenius(b_bar @ a_bar - mean_product(states, weights))
