"""
Federated round loop.

One round: sample participants, run local mini-batch SGD on every sampled
client from the broadcast model, upload, aggregate with the scheme's rule,
then evaluate the new global model and record a RoundMetrics row.
"""

import math
import time
from dataclasses import astuple, dataclass, fields
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .adapter import InitScheme
from .baselines import SchemeId
from .errors import DivergenceError
from .schemes import FlorgScheme, GlobalState, LayerReport, LayerState, Scheme, make_scheme
from .seeding import TAG_PARTITION, TAG_SAMPLING, TAG_SHUFFLE, derive_seed, rng_for
from .tasks import ClientShard, Dataset, SyntheticTask, TaskSpec, dirichlet_partition, generate_task
from . import mylogger

logger = mylogger.get_logger(__name__)


class Weighting(str, Enum):
    UNIFORM = "uniform"
    DATASET_SIZE = "dataset_size"


class ExperimentConfig(BaseModel):
    """Everything one federated run depends on. Defaults follow the reference experiments."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    task: TaskSpec = Field(default_factory=TaskSpec)
    scheme: SchemeId = SchemeId.FLORG
    num_clients: int = Field(default=20, ge=1)
    rounds: int = Field(default=100, ge=1)
    eta: float = Field(default=5e-5, ge=0)
    rank: int = Field(default=4, ge=1)
    alpha: float = Field(default=16.0, gt=0)
    dirichlet_rho: float = Field(default=0.5, gt=0)
    participation_ratio: float = Field(default=1.0, gt=0, le=1)
    batch_size: int = Field(default=4, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    align: bool = True
    init_scheme: InitScheme = InitScheme.SEMI_ORTHOGONAL
    weighting: Weighting = Weighting.UNIFORM
    seed: int = Field(default=0, ge=0)
    target_loss_ratio: float = Field(default=1e-3, gt=0)
    log_every: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        if self.rank > self.task.k:
            raise ValueError(f"rank={self.rank} exceeds min(d_in, d_out)={self.task.k}")
        if self.num_clients > self.task.num_samples:
            raise ValueError(f"num_clients={self.num_clients} exceeds num_samples={self.task.num_samples}")
        return self

    @property
    def participants_per_round(self) -> int:
        return min(self.num_clients, math.ceil(self.participation_ratio * self.num_clients - 1e-12))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment under another seed; the task is redrawn too."""
        return self.model_copy(update={"seed": seed, "task": self.task.model_copy(update={"seed": seed})})


@dataclass(frozen=True)
class RoundMetrics:
    """One CSV row. Field order is the column order of metrics.csv."""

    round: int
    global_loss: float
    grad_norm: float
    agg_error: float
    gram_preservation_err: float
    truncation_loss: float
    delta_proc: float
    lambda_min: float
    sigma_min_cross: float
    omega: float
    uplink_params: int
    downlink_params: int
    eval_accuracy: float
    num_participants: int
    server_flops: int

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> tuple:
        return astuple(self)


@dataclass(frozen=True)
class RoundTrace:
    """Per-round raw quantities behind the convergence-bound diagnostics."""

    round: int
    train_loss: float
    psi: float
    a_norm: float
    a_tilde_norm: float
    lambda_min: float
    delta_proc: float
    sigma_min_cross: float


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    layers: Tuple[LayerState, ...]
    payload: Tuple[dict, ...]
    steps: int
    sample_count: int
    max_grad_sq: float


MetricsSink = Callable[[RoundMetrics], None]


def _combine_norms(values: Sequence[float]) -> float:
    return float(math.sqrt(sum(v * v for v in values)))


def _nanmin(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return min(finite) if finite else float("nan")


def rounds_to_target(metrics: Sequence[RoundMetrics], initial_loss: float, ratio: float) -> Optional[int]:
    """First round whose global loss is at or below ratio * initial loss, or None."""
    target = ratio * initial_loss
    for row in metrics:
        if row.global_loss <= target:
            return row.round
    return None


# ============================================================================
# CLIENT SIDE
# ============================================================================

def client_round(
    data: Dataset,
    layers: Tuple[LayerState, ...],
    cfg: ExperimentConfig,
    scheme: Scheme,
    task: SyntheticTask,
    round_idx: int,
    client_id: int,
) -> ClientUpdate:
    """local_epochs passes of mini-batch SGD over the shard in a seeded shuffled order."""
    rng = rng_for(cfg.seed, TAG_SHUFFLE, round_idx, client_id)
    m = data.size
    steps = 0
    max_grad_sq = 0.0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = task.loss_and_grads(scheme.full_weights(layers), batch)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite local loss {loss}", round_idx=round_idx, client_id=client_id)
            grad_sq = sum(
                float(np.sum(g * g)) for layer, full in zip(layers, grads)
                for g in scheme.trainable_grads(layer, full)
            )
            max_grad_sq = max(max_grad_sq, grad_sq)
            layers = scheme.local_step(layers, grads, cfg.eta, round_idx, client_id)
            steps += 1
    logger.debug(f"client {client_id}: {steps} local steps over {m} samples")
    return ClientUpdate(
        client_id=client_id,
        layers=layers,
        payload=tuple(scheme.upload(layer) for layer in layers),
        steps=steps,
        sample_count=m,
        max_grad_sq=max_grad_sq,
    )


# ============================================================================
# EXPERIMENT
# ============================================================================

class Experiment:
    """Task, shards, scheme and global state of one run; advances one round at a time."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.scheme = make_scheme(cfg.scheme, cfg.rank, cfg.alpha, cfg.seed, cfg.init_scheme, align=cfg.align)
        # The planted target always lives in the FLoRG adapter subspace, whatever scheme trains on it.
        planting = self.scheme if isinstance(self.scheme, FlorgScheme) else \
            FlorgScheme(cfg.rank, cfg.alpha, cfg.seed, cfg.init_scheme)
        self.task = generate_task(cfg.task, planting.bases, planted_scale=cfg.alpha / cfg.rank)
        self.shards: List[ClientShard] = dirichlet_partition(
            self.task.train.labels, cfg.num_clients, cfg.dirichlet_rho, derive_seed(cfg.seed, TAG_PARTITION),
        )
        self.client_data = [self.task.train.take(shard.indices) for shard in self.shards]
        self.state: GlobalState = self.scheme.init_global(self.task.w0, cfg.num_clients)
        self.round_idx = 0
        self.metrics: List[RoundMetrics] = []
        self.history: List[RoundTrace] = []
        self.initial_loss, _ = self.evaluate(self.state)
        self.initial_train_loss = self._train_loss_and_grad_norm(self.state)[0]
        self.run_id = f"{cfg.scheme.value}-s{cfg.seed}"

    # -- evaluation --------------------------------------------------------

    def evaluate(self, state: GlobalState) -> Tuple[float, float]:
        """Held-out (loss, accuracy), averaged over the scheme's evaluation models."""
        losses, accuracies = [], []
        for layers in self.scheme.eval_models(state):
            weights = self.scheme.full_weights(layers)
            losses.append(self.task.loss(weights, self.task.eval))
            accuracies.append(self.task.accuracy(weights, self.task.eval))
        return float(np.mean(losses)), float(np.mean(accuracies))

    def _train_loss_and_grad_norm(self, state: GlobalState) -> Tuple[float, float]:
        losses, norms = [], []
        for layers in self.scheme.eval_models(state):
            loss, grads = self.task.loss_and_grads(self.scheme.full_weights(layers), self.task.train)
            sq = sum(
                float(np.sum(g * g)) for layer, full in zip(layers, grads)
                for g in self.scheme.trainable_grads(layer, full)
            )
            losses.append(loss)
            norms.append(sq)
        return float(np.mean(losses)), float(math.sqrt(np.mean(norms)))

    # -- one round ---------------------------------------------------------

    def sample_participants(self, round_idx: int) -> List[int]:
        cfg = self.cfg
        count = cfg.participants_per_round
        if count >= cfg.num_clients:
            return list(range(cfg.num_clients))
        chosen = rng_for(cfg.seed, TAG_SAMPLING, round_idx).choice(cfg.num_clients, size=count, replace=False)
        return sorted(int(c) for c in chosen)

    def aggregation_weights(self, client_ids: Sequence[int]) -> List[float]:
        if self.cfg.weighting is Weighting.UNIFORM:
            return [1.0 / len(client_ids)] * len(client_ids)
        counts = np.array([self.shards[c].sample_count for c in client_ids], dtype=np.float64)
        return (counts / counts.sum()).tolist()

    def run_round(self, round_idx: int) -> RoundMetrics:
        """Train the sampled clients from the current global state, aggregate, evaluate."""
        cfg = self.cfg
        participants = self.sample_participants(round_idx)
        updates = [
            client_round(
                self.client_data[cid], self.scheme.client_start(self.state, cid), cfg,
                self.scheme, self.task, round_idx, cid,
            )
            for cid in participants
        ]
        weights = self.aggregation_weights(participants)
        try:
            new_state, reports = self.scheme.aggregate(
                self.state, participants, [u.layers for u in updates], weights,
            )
        except DivergenceError as e:
            if e.round_idx is not None:
                raise
            raise DivergenceError(e.message, round_idx=round_idx) from e

        loss, accuracy = self.evaluate(new_state)
        train_loss, grad_norm = self._train_loss_and_grad_norm(new_state)
        if not (math.isfinite(loss) and math.isfinite(train_loss)):
            raise DivergenceError(f"global loss became non-finite ({loss})", round_idx=round_idx)
        self.state = new_state

        metrics = self._round_metrics(round_idx, participants, reports, loss, accuracy, grad_norm)
        self.history.append(RoundTrace(
            round=round_idx,
            train_loss=train_loss,
            psi=max(u.max_grad_sq for u in updates),
            a_norm=_combine_norms([float(np.linalg.norm(layer.a)) for layer in new_state.layers]),
            a_tilde_norm=_combine_norms([r.a_tilde_norm for r in reports]),
            lambda_min=metrics.lambda_min,
            delta_proc=metrics.delta_proc,
            sigma_min_cross=metrics.sigma_min_cross,
        ))
        self.metrics.append(metrics)
        self.round_idx = round_idx
        return metrics

    def _round_metrics(
        self, round_idx: int, participants: Sequence[int], reports: Sequence[LayerReport],
        loss: float, accuracy: float, grad_norm: float,
    ) -> RoundMetrics:
        shapes = [w.shape for w in self.task.w0]
        uplink = sum(self.scheme.uplink_params(*shape) for shape in shapes) * len(participants)
        downlink = sum(self.scheme.downlink_params(*shape) for shape in shapes) * len(participants)
        lambda_min = _nanmin([r.lambda_min for r in reports])
        omega = float("nan")
        if not math.isnan(lambda_min):
            running = _nanmin([lambda_min] + [t.lambda_min for t in self.history])
            eta = self.cfg.eta
            omega = 4.0 * eta * running - eta * eta / 2.0 - eta / 2.0
        return RoundMetrics(
            round=round_idx,
            global_loss=loss,
            grad_norm=grad_norm,
            agg_error=_combine_norms([r.agg_error for r in reports]),
            gram_preservation_err=_combine_norms([r.gram_preservation_err for r in reports]),
            truncation_loss=float(sum(r.truncation_loss for r in reports)),
            delta_proc=float(sum(r.delta_proc for r in reports)),
            lambda_min=lambda_min,
            sigma_min_cross=_nanmin([r.sigma_min_cross for r in reports]),
            omega=omega,
            uplink_params=int(uplink),
            downlink_params=int(downlink),
            eval_accuracy=accuracy,
            num_participants=len(participants),
            server_flops=int(sum(r.server_flops for r in reports)),
        )

    # -- whole run ---------------------------------------------------------

    def run(self, sink: Optional[MetricsSink] = None) -> List[RoundMetrics]:
        cfg = self.cfg
        started = time.monotonic()
        with mylogger.run_context(run_id=self.run_id):
            logger.info(
                f"🚀 starting {cfg.scheme.value}: N={cfg.num_clients}, T={cfg.rounds}, r={cfg.rank}, "
                f"eta={cfg.eta:g}, initial loss {self.initial_loss:.6e}"
            )
            for round_idx in range(self.round_idx + 1, cfg.rounds + 1):
                with mylogger.run_context(round_idx=round_idx):
                    try:
                        metrics = self.run_round(round_idx)
                    except DivergenceError as e:
                        logger.error(f"❌ run diverged: {e}")
                        raise
                    if sink is not None:
                        sink(metrics)
                    if round_idx % cfg.log_every == 0 or round_idx == cfg.rounds:
                        logger.info(
                            f"📊 loss={metrics.global_loss:.6e} agg_err={metrics.agg_error:.3e} "
                            f"delta_proc={metrics.delta_proc:.3e} uplink={metrics.uplink_params}"
                        )
            logger.info(f"✅ finished {cfg.rounds} rounds in {time.monotonic() - started:.2f}s")
        return list(self.metrics)


def run_experiment(cfg: ExperimentConfig, sink: Optional[MetricsSink] = None) -> List[RoundMetrics]:
    """Execute all cfg.rounds rounds and return the metrics series."""
    return Experiment(cfg).run(sink)
