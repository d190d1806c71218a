"""
Desk-scale synthetic tasks and non-iid client partitioning.

MatrixRecovery plants a low-rank perturbation of W0 inside the shared adapter
subspace, so FLoRG can represent the optimum exactly when r >= true_rank.
SoftmaxClassify trains a linear classifier on Gaussian-cluster features.
Both draw features from per-class clusters, so label skew from the Dirichlet
partition turns into feature heterogeneity across clients.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractViolation
from .linalg import Matrix, orthonormal_columns
from .seeding import TAG_PARTITION, TAG_TASK, derive_seed
from . import mylogger

logger = mylogger.get_logger(__name__)

DIRICHLET_MAX_ATTEMPTS = 100

BasisFactory = Callable[[int, Matrix], Tuple[Matrix, Matrix]]


class TaskKind(str, Enum):
    MATRIX_RECOVERY = "matrix_recovery"
    SOFTMAX_CLASSIFY = "softmax_classify"


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: TaskKind = TaskKind.MATRIX_RECOVERY
    d_out: int = Field(default=32, ge=1)
    d_in: int = Field(default=32, ge=1)
    num_samples: int = Field(default=1024, ge=1)
    num_eval_samples: int = Field(default=256, ge=1)
    true_rank: int = Field(default=2, ge=0)
    noise_std: float = Field(default=0.0, ge=0)
    num_classes: int = Field(default=4, ge=1)
    num_layers: int = Field(default=1, ge=1)
    cluster_separation: float = Field(default=1.0, ge=0)
    seed: int = Field(default=0, ge=0)

    @property
    def k(self) -> int:
        return min(self.d_in, self.d_out)

    @model_validator(mode="after")
    def _consistent(self):
        if self.true_rank > self.k:
            raise ValueError(f"true_rank={self.true_rank} exceeds min(d_in, d_out)={self.k}")
        if self.kind is TaskKind.SOFTMAX_CLASSIFY:
            if self.num_classes < 2:
                raise ValueError("softmax classification needs num_classes >= 2")
            if self.d_out != self.num_classes:
                raise ValueError(f"softmax classification needs d_out == num_classes ({self.num_classes})")
            if self.num_layers != 1:
                raise ValueError("softmax classification supports a single layer")
        if self.num_samples < self.num_classes:
            raise ValueError("num_samples must cover every class at least once")
        return self


# ============================================================================
# DATA CONTAINERS
# ============================================================================

@dataclass(frozen=True)
class Dataset:
    """Rows are samples. `targets` holds one response matrix per layer (regression only)."""

    features: Matrix
    labels: np.ndarray
    targets: Optional[Tuple[Matrix, ...]] = None

    @property
    def size(self) -> int:
        return self.features.shape[0]

    def take(self, indices: np.ndarray) -> "Dataset":
        targets = None if self.targets is None else tuple(t[indices] for t in self.targets)
        return Dataset(features=self.features[indices], labels=self.labels[indices], targets=targets)


@dataclass(frozen=True)
class ClientShard:
    """A client's local dataset, referenced by row index into the training set."""

    client_id: int
    indices: np.ndarray

    @property
    def sample_count(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class SyntheticTask:
    spec: TaskSpec
    w0: Tuple[Matrix, ...]
    train: Dataset
    eval: Dataset
    w_target: Optional[Tuple[Matrix, ...]] = None

    @property
    def num_layers(self) -> int:
        return len(self.w0)

    # ------------------------------------------------------------------ loss

    def loss(self, weights: Sequence[Matrix], data: Dataset) -> float:
        return self.loss_and_grads(weights, data, need_grads=False)[0]

    def loss_and_grads(
        self, weights: Sequence[Matrix], data: Dataset, need_grads: bool = True,
    ) -> Tuple[float, List[Matrix]]:
        """Mean loss over `data` and its gradient with respect to every full layer weight."""
        x = data.features
        m = x.shape[0]
        grads: List[Matrix] = []
        if self.spec.kind is TaskKind.MATRIX_RECOVERY:
            total = 0.0
            for w, y in zip(weights, data.targets):
                resid = x @ w.T - y
                total += 0.5 * float(np.sum(resid * resid)) / m
                if need_grads:
                    grads.append(resid.T @ x / m)
            return total, grads

        logits = x @ weights[0].T
        logits = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(logits), axis=1))
        log_prob = logits[np.arange(m), data.labels] - log_norm
        total = -float(np.mean(log_prob))
        if need_grads:
            probs = np.exp(logits - log_norm[:, None])
            probs[np.arange(m), data.labels] -= 1.0
            grads.append(probs.T @ x / m)
        return total, grads

    def accuracy(self, weights: Sequence[Matrix], data: Dataset) -> float:
        if self.spec.kind is not TaskKind.SOFTMAX_CLASSIFY:
            return float("nan")
        predictions = np.argmax(data.features @ weights[0].T, axis=1)
        return float(np.mean(predictions == data.labels))


# ============================================================================
# TASK GENERATION
# ============================================================================

def _default_bases(spec: TaskSpec) -> BasisFactory:
    def factory(layer: int, w0: Matrix) -> Tuple[Matrix, Matrix]:
        l_basis = orthonormal_columns(spec.d_out, spec.k, derive_seed(spec.seed, TAG_TASK, layer, 1))
        r_basis = orthonormal_columns(spec.d_in, spec.k, derive_seed(spec.seed, TAG_TASK, layer, 2)).T
        return l_basis, r_basis
    return factory


def _draw_split(
    rng: np.random.Generator, means: Matrix, count: int, num_classes: int,
) -> Tuple[Matrix, np.ndarray]:
    labels = rng.permutation(np.arange(count) % num_classes)
    features = means[labels] + rng.standard_normal((count, means.shape[1]))
    return features, labels


def generate_task(
    spec: TaskSpec, basis_factory: Optional[BasisFactory] = None, planted_scale: float = 1.0,
) -> SyntheticTask:
    """
    Draw W0, the planted targets and the train/eval splits, deterministically per spec.seed.

    basis_factory(layer, w0) -> (L0, R0) chooses the subspace the MatrixRecovery
    perturbation is planted in; pass the adapters' basis initializer to make the
    task realizable for FLoRG.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, TAG_TASK))
    basis_factory = basis_factory or _default_bases(spec)
    k = spec.k

    means = rng.normal(0.0, spec.cluster_separation / np.sqrt(spec.d_in), size=(spec.num_classes, spec.d_in))
    train_x, train_y = _draw_split(rng, means, spec.num_samples, spec.num_classes)
    eval_x, eval_y = _draw_split(rng, means, spec.num_eval_samples, spec.num_classes)

    w0_layers = []
    target_layers = []
    train_targets = []
    eval_targets = []
    for layer in range(spec.num_layers):
        w0 = rng.normal(0.0, 1.0 / np.sqrt(spec.d_in), size=(spec.d_out, spec.d_in))
        w0_layers.append(w0)
        if spec.kind is not TaskKind.MATRIX_RECOVERY:
            continue
        l0, r0 = basis_factory(layer, w0)
        m0 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(spec.true_rank, k))
        w_target = w0 + planted_scale * (l0 @ (m0.T @ m0) @ r0)
        target_layers.append(w_target)
        train_targets.append(train_x @ w_target.T + spec.noise_std * rng.standard_normal((spec.num_samples, spec.d_out)))
        eval_targets.append(eval_x @ w_target.T + spec.noise_std * rng.standard_normal((spec.num_eval_samples, spec.d_out)))

    regression = spec.kind is TaskKind.MATRIX_RECOVERY
    train = Dataset(train_x, train_y, tuple(train_targets) if regression else None)
    evaluation = Dataset(eval_x, eval_y, tuple(eval_targets) if regression else None)
    logger.debug(f"generated {spec.kind.value} task: {spec.num_layers} layer(s), {spec.num_samples} train samples")
    return SyntheticTask(
        spec=spec,
        w0=tuple(w0_layers),
        train=train,
        eval=evaluation,
        w_target=tuple(target_layers) if regression else None,
    )


# ============================================================================
# DIRICHLET PARTITIONING
# ============================================================================

def _dirichlet_assignment(labels: np.ndarray, n_clients: int, rho: float, seed: int) -> List[List[int]]:
    rng = np.random.default_rng(seed)
    buckets: List[List[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(n_clients, rho))
        cuts = (np.cumsum(proportions) * idx.size).astype(int)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    return buckets


def _round_robin_fill(buckets: List[List[int]]) -> List[List[int]]:
    for client, bucket in enumerate(buckets):
        if bucket:
            continue
        donor = max(range(len(buckets)), key=lambda c: (len(buckets[c]), -c))
        bucket.append(buckets[donor].pop())
    return buckets


def dirichlet_partition(labels: Sequence[int], n_clients: int, rho: float, seed: int) -> List[ClientShard]:
    """
    Per-class client proportions drawn from Dir(rho). Draws that leave a client
    empty are redrawn with a fresh sub-seed; after DIRICHLET_MAX_ATTEMPTS the
    largest shards donate samples round-robin.
    """
    labels = np.asarray(labels)
    if rho <= 0:
        raise ContractViolation(f"Dirichlet concentration rho must be positive, got {rho}")
    if n_clients < 1:
        raise ContractViolation(f"n_clients must be positive, got {n_clients}")
    if n_clients > labels.size:
        raise ContractViolation(f"cannot give {n_clients} clients at least one of {labels.size} samples")

    buckets = None
    for attempt in range(DIRICHLET_MAX_ATTEMPTS):
        candidate = _dirichlet_assignment(labels, n_clients, rho, derive_seed(seed, TAG_PARTITION, attempt))
        if all(candidate):
            buckets = candidate
            break
    if buckets is None:
        logger.warning(f"Dirichlet draw left empty clients after {DIRICHLET_MAX_ATTEMPTS} attempts; filling round-robin")
        buckets = _round_robin_fill(candidate)
    return [
        ClientShard(client_id=cid, indices=np.sort(np.asarray(bucket, dtype=np.int64)))
        for cid, bucket in enumerate(buckets)
    ]
