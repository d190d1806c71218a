"""
Client-side FLoRG adapter: frozen bases L, R and a single trainable matrix A.

The fine-tuning update of one linear layer is

    delta_W = (alpha / r) * L @ (A^T A) @ R

with L (d_out x k) and R (k x d_in) semi-orthogonal, k = min(d_in, d_out),
and A of shape r x k.
"""

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractViolation, DivergenceError
from .linalg import Matrix, as_matrix, orthonormal_columns, orthonormalize_columns, require_shape, thin_svd
from .seeding import TAG_A_INIT, TAG_BASIS_L, TAG_BASIS_R, derive_seed


class InitScheme(str, Enum):
    SEMI_ORTHOGONAL = "semi_orthogonal"
    KAIMING = "kaiming"
    SVD = "svd"


class AdapterConfig(BaseModel):
    """Shape and initialization parameters of one FLoRG adapter."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_out: int = Field(ge=1)
    d_in: int = Field(ge=1)
    r: int = Field(ge=1)
    alpha: float = Field(gt=0)
    init_scheme: InitScheme = InitScheme.SEMI_ORTHOGONAL
    seed: int = Field(default=0, ge=0)

    @property
    def k(self) -> int:
        return min(self.d_in, self.d_out)

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @model_validator(mode="after")
    def _rank_fits(self):
        if self.r > self.k:
            raise ValueError(f"rank r={self.r} exceeds k=min(d_in, d_out)={self.k}")
        return self


def _frozen(m: Matrix) -> Matrix:
    m = np.array(m, dtype=np.float64, order="C", copy=True)
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class AdapterState:
    """Per-layer FLoRG state. w0, l_basis and r_basis are read-only arrays."""

    config: AdapterConfig
    w0: Matrix
    l_basis: Matrix
    r_basis: Matrix
    a: Matrix

    @property
    def k(self) -> int:
        return self.config.k

    def with_a(self, a: Matrix) -> "AdapterState":
        """Replace the trainable matrix; the frozen arrays are shared, not copied."""
        a = as_matrix(a, "a")
        require_shape(a, (self.config.r, self.k), "a")
        return dataclasses.replace(self, a=a)


# ============================================================================
# INITIALIZATION
# ============================================================================

def init_bases(scheme: InitScheme, w0: Matrix, seed: int) -> Tuple[Matrix, Matrix]:
    """Shared frozen bases (L, R) with L^T L = I_k and R R^T = I_k."""
    d_out, d_in = w0.shape
    k = min(d_out, d_in)
    scheme = InitScheme(scheme)
    if scheme is InitScheme.SEMI_ORTHOGONAL:
        l_basis = orthonormal_columns(d_out, k, derive_seed(seed, TAG_BASIS_L))
        r_basis = orthonormal_columns(d_in, k, derive_seed(seed, TAG_BASIS_R)).T
    elif scheme is InitScheme.KAIMING:
        # nn.Linear default: kaiming-uniform with a = sqrt(5) gives U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
        # then orthonormalized so L^T L = I holds for the gradient formula.
        rng_l = np.random.default_rng(derive_seed(seed, TAG_BASIS_L))
        rng_r = np.random.default_rng(derive_seed(seed, TAG_BASIS_R))
        bound_l = 1.0 / np.sqrt(k)
        bound_r = 1.0 / np.sqrt(d_in)
        l_basis = orthonormalize_columns(rng_l.uniform(-bound_l, bound_l, size=(d_out, k)))
        r_basis = orthonormalize_columns(rng_r.uniform(-bound_r, bound_r, size=(d_in, k))).T
    else:
        svd = thin_svd(w0)
        l_basis = svd.u[:, :k]
        r_basis = svd.v[:, :k].T
    return np.ascontiguousarray(l_basis), np.ascontiguousarray(r_basis)


def init_adapter(config: AdapterConfig, w0: Matrix) -> AdapterState:
    """Build the frozen bases and a Gaussian A with std 1/sqrt(k)."""
    w0 = as_matrix(w0, "w0")
    require_shape(w0, (config.d_out, config.d_in), "w0")
    l_basis, r_basis = init_bases(config.init_scheme, w0, config.seed)
    rng = np.random.default_rng(derive_seed(config.seed, TAG_A_INIT))
    a = rng.normal(0.0, 1.0 / np.sqrt(config.k), size=(config.r, config.k))
    return AdapterState(
        config=config,
        w0=_frozen(w0),
        l_basis=_frozen(l_basis),
        r_basis=_frozen(r_basis),
        a=np.ascontiguousarray(a),
    )


# ============================================================================
# FORWARD AND GRADIENT
# ============================================================================

def delta_w(state: AdapterState) -> Matrix:
    """(alpha / r) * L (A^T A) R."""
    gram = state.a.T @ state.a
    return state.config.scale * (state.l_basis @ gram @ state.r_basis)


def full_weight(state: AdapterState) -> Matrix:
    return state.w0 + delta_w(state)


def grad_a(state: AdapterState, g_full: Matrix) -> Matrix:
    """
    Chain rule through delta_W: (alpha / r) * A (H + H^T), H = L^T g_full R^T.

    g_full is the loss gradient with respect to the full weight W.
    """
    g_full = np.asarray(g_full, dtype=np.float64)
    require_shape(g_full, (state.config.d_out, state.config.d_in), "g_full")
    h = state.l_basis.T @ g_full @ state.r_basis.T
    return state.config.scale * (state.a @ (h + h.T))


def local_update(
    state: AdapterState,
    g_full: Matrix,
    eta: float,
    round_idx: Optional[int] = None,
    client_id: Optional[int] = None,
) -> Matrix:
    """One SGD step on A. Returns the new A; `state` is left untouched."""
    if eta < 0:
        raise ContractViolation(f"learning rate must be non-negative, got {eta}")
    with np.errstate(over="ignore", invalid="ignore"):
        grad = grad_a(state, g_full)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite gradient of A", round_idx=round_idx, client_id=client_id)
        a_next = state.a - eta * grad
    if not np.all(np.isfinite(a_next)):
        raise DivergenceError("non-finite A after local step", round_idx=round_idx, client_id=client_id)
    return a_next
