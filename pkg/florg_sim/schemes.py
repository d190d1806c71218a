"""
Per-scheme federation protocol.

Each scheme knows how to initialize the global model, hand a client its
starting state, take one local SGD step, build the upload/downlink payloads,
aggregate, and report communication in parameters. The round loop in
federation.py is scheme-agnostic and only talks to this interface.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple, Type, Union

import numpy as np

from . import adapter as florg
from . import baselines
from . import server_core
from .adapter import AdapterConfig, AdapterState, InitScheme
from .baselines import LoraState, SchemeId
from .errors import ContractViolation
from .linalg import Matrix, frobenius
from .seeding import TAG_ADAPTER, TAG_LORA, derive_seed

LayerState = Union[AdapterState, LoraState]
Payload = Dict[str, Matrix]


@dataclass(frozen=True)
class GlobalState:
    """Global per-layer model plus per-client matrices that never leave the client (FedSA b)."""

    layers: Tuple[LayerState, ...]
    personal: Mapping[int, Tuple[Matrix, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class LayerReport:
    """Server-side measurements for one layer and round. NaN marks fields a scheme does not define."""

    agg_error: float
    gram_preservation_err: float = 0.0
    truncation_loss: float = 0.0
    delta_proc: float = 0.0
    sigma_min_cross: float = float("nan")
    lambda_min: float = float("nan")
    a_tilde_norm: float = float("nan")
    server_flops: int = 0


def smallest_positive_eigenvalue(a: Matrix) -> float:
    """lambda_min of A^T A over its non-zero spectrum, read off the r x r matrix A A^T."""
    small = a @ a.T
    values = np.linalg.eigvalsh(small)
    tol = 1e-10 * float(np.trace(small))
    positive = values[values > tol]
    return float(positive.min()) if positive.size else 0.0


# ============================================================================
# SCHEME BASE
# ============================================================================

class Scheme:
    """Protocol for one federated fine-tuning scheme over independent adapter layers."""

    scheme_id: SchemeId

    def __init__(self, rank: int, alpha: float, seed: int, init_scheme: InitScheme = InitScheme.SEMI_ORTHOGONAL):
        self.rank = rank
        self.alpha = alpha
        self.seed = seed
        self.init_scheme = InitScheme(init_scheme)

    # -- lifecycle ---------------------------------------------------------

    def init_global(self, w0s: Sequence[Matrix], num_clients: int) -> GlobalState:
        raise NotImplementedError

    def client_start(self, state: GlobalState, client_id: int) -> Tuple[LayerState, ...]:
        return state.layers

    def local_step(
        self, layers: Sequence[LayerState], grads: Sequence[Matrix], eta: float,
        round_idx: int, client_id: int,
    ) -> Tuple[LayerState, ...]:
        raise NotImplementedError

    def aggregate(
        self, state: GlobalState, client_ids: Sequence[int],
        client_layers: Sequence[Sequence[LayerState]], weights: Sequence[float],
    ) -> Tuple[GlobalState, List[LayerReport]]:
        raise NotImplementedError

    # -- model views -------------------------------------------------------

    def full_weights(self, layers: Sequence[LayerState]) -> List[Matrix]:
        raise NotImplementedError

    def eval_models(self, state: GlobalState) -> List[Tuple[LayerState, ...]]:
        """Models whose held-out losses are averaged into the global metrics."""
        return [state.layers]

    def trainable_grads(self, layer: LayerState, g_full: Matrix) -> List[Matrix]:
        raise NotImplementedError

    # -- communication -----------------------------------------------------

    def upload(self, layer: LayerState) -> Payload:
        raise NotImplementedError

    def download(self, layer: LayerState) -> Payload:
        return self.upload(layer)

    def uplink_params(self, d_out: int, d_in: int) -> int:
        raise NotImplementedError

    def downlink_params(self, d_out: int, d_in: int) -> int:
        return self.uplink_params(d_out, d_in)

    # -- persistence -------------------------------------------------------

    def state_matrices(self, state: GlobalState) -> Dict[str, Matrix]:
        out: Dict[str, Matrix] = {}
        for idx, layer in enumerate(state.layers):
            for name, m in self.layer_matrices(layer).items():
                out[f"layer{idx}.{name}"] = m
        for client_id in sorted(state.personal):
            for idx, m in enumerate(state.personal[client_id]):
                out[f"client{client_id}.layer{idx}.b"] = m
        return out

    def layer_matrices(self, layer: LayerState) -> Dict[str, Matrix]:
        raise NotImplementedError


# ============================================================================
# FLoRG
# ============================================================================

class FlorgScheme(Scheme):
    """Single trainable A per layer, Gram aggregation, eigendecomposition and Procrustes alignment."""

    scheme_id = SchemeId.FLORG

    def __init__(self, rank: int, alpha: float, seed: int,
                 init_scheme: InitScheme = InitScheme.SEMI_ORTHOGONAL, align: bool = True):
        super().__init__(rank, alpha, seed, init_scheme)
        self.align = align

    def adapter_config(self, layer: int, w0: Matrix) -> AdapterConfig:
        d_out, d_in = w0.shape
        return AdapterConfig(
            d_out=d_out, d_in=d_in, r=self.rank, alpha=self.alpha,
            init_scheme=self.init_scheme, seed=derive_seed(self.seed, TAG_ADAPTER, layer),
        )

    def bases(self, layer: int, w0: Matrix) -> Tuple[Matrix, Matrix]:
        """The frozen (L, R) layer `layer` will use; lets the task plant its target in the same subspace."""
        return florg.init_bases(self.init_scheme, w0, self.adapter_config(layer, w0).seed)

    def init_global(self, w0s, num_clients):
        return GlobalState(layers=tuple(
            florg.init_adapter(self.adapter_config(idx, w0), w0) for idx, w0 in enumerate(w0s)
        ))

    def local_step(self, layers, grads, eta, round_idx, client_id):
        return tuple(
            layer.with_a(florg.local_update(layer, g, eta, round_idx=round_idx, client_id=client_id))
            for layer, g in zip(layers, grads)
        )

    def aggregate(self, state, client_ids, client_layers, weights):
        new_layers = []
        reports = []
        for idx, layer in enumerate(state.layers):
            uploads = [layers[idx].a for layers in client_layers]
            report = server_core.server_update(layer.a, uploads, weights, target_r=self.rank, align=self.align)
            new_layers.append(layer.with_a(report.a_next))
            reports.append(LayerReport(
                agg_error=server_core.gram_aggregation_error(uploads, weights, report.aggregate),
                gram_preservation_err=report.gram_preservation_err,
                truncation_loss=report.factor.truncation_loss,
                delta_proc=report.alignment.delta_proc,
                sigma_min_cross=report.alignment.sigma_min_cross,
                lambda_min=smallest_positive_eigenvalue(report.a_next),
                a_tilde_norm=frobenius(report.factor.a_tilde),
                server_flops=report.server_flops,
            ))
        return dataclasses.replace(state, layers=tuple(new_layers)), reports

    def full_weights(self, layers):
        return [server_core.assemble_full(layer, layer.a) for layer in layers]

    def trainable_grads(self, layer, g_full):
        return [florg.grad_a(layer, g_full)]

    def upload(self, layer):
        return {"a": layer.a}

    def uplink_params(self, d_out, d_in):
        return self.rank * min(d_out, d_in)

    def layer_matrices(self, layer: AdapterState):
        return {"w0": layer.w0, "l_basis": layer.l_basis, "r_basis": layer.r_basis, "a": layer.a}


# ============================================================================
# TWO-MATRIX LoRA BASELINES
# ============================================================================

class LoraScheme(Scheme):
    """Shared plumbing for the baselines: b = 0 / Gaussian-a init and SGD on both factors."""

    def init_global(self, w0s, num_clients):
        return GlobalState(layers=tuple(
            baselines.init_lora(w0, self.rank, self.alpha, derive_seed(self.seed, TAG_LORA, idx))
            for idx, w0 in enumerate(w0s)
        ))

    def local_step(self, layers, grads, eta, round_idx, client_id):
        return tuple(
            baselines.lora_step(layer, g, eta, round_idx=round_idx, client_id=client_id)
            for layer, g in zip(layers, grads)
        )

    def full_weights(self, layers):
        return [layer.full_weight() for layer in layers]

    def trainable_grads(self, layer, g_full):
        return list(baselines.lora_grads(layer, g_full))

    def upload(self, layer):
        return {"b": layer.b, "a": layer.a}

    def uplink_params(self, d_out, d_in):
        return self.rank * (d_out + d_in)

    def layer_matrices(self, layer: LoraState):
        return {"w0": layer.w0, "b": layer.b, "a": layer.a}

    def _per_layer(self, client_layers, idx) -> List[LoraState]:
        return [layers[idx] for layers in client_layers]


class FedItScheme(LoraScheme):
    scheme_id = SchemeId.FEDIT

    def aggregate(self, state, client_ids, client_layers, weights):
        new_layers, reports = [], []
        for idx in range(len(state.layers)):
            states = self._per_layer(client_layers, idx)
            new_layers.append(baselines.fedit_aggregate(states, weights))
            reports.append(LayerReport(agg_error=baselines.aggregation_error(states, weights)))
        return dataclasses.replace(state, layers=tuple(new_layers)), reports


class FederaScheme(LoraScheme):
    scheme_id = SchemeId.FEDERA

    def aggregate(self, state, client_ids, client_layers, weights):
        new_layers, reports = [], []
        for idx in range(len(state.layers)):
            states = self._per_layer(client_layers, idx)
            merged = baselines.federa_aggregate(states, self.rank, weights)
            err = frobenius(merged.b @ merged.a - baselines.mean_product(states, weights))
            new_layers.append(merged)
            reports.append(LayerReport(agg_error=err))
        return dataclasses.replace(state, layers=tuple(new_layers)), reports


class FfaScheme(LoraScheme):
    """FFA-LoRA: a frozen at its initialization, only b trains and travels."""

    scheme_id = SchemeId.FFA_LORA

    def local_step(self, layers, grads, eta, round_idx, client_id):
        return tuple(
            baselines.ffa_step(layer, g, eta, round_idx=round_idx, client_id=client_id)
            for layer, g in zip(layers, grads)
        )

    def aggregate(self, state, client_ids, client_layers, weights):
        new_layers, reports = [], []
        for idx in range(len(state.layers)):
            states = self._per_layer(client_layers, idx)
            new_layers.append(baselines.ffa_aggregate(states, weights))
            reports.append(LayerReport(agg_error=baselines.aggregation_error(states, weights)))
        return dataclasses.replace(state, layers=tuple(new_layers)), reports

    def trainable_grads(self, layer, g_full):
        return [baselines.lora_grads(layer, g_full)[0]]

    def upload(self, layer):
        return {"b": layer.b}

    def uplink_params(self, d_out, d_in):
        return self.rank * d_out


class FedSaScheme(LoraScheme):
    """FedSA-LoRA: a is shared and averaged, every client keeps its own b."""

    scheme_id = SchemeId.FEDSA_LORA

    def init_global(self, w0s, num_clients):
        base = super().init_global(w0s, num_clients)
        personal = {cid: tuple(layer.b.copy() for layer in base.layers) for cid in range(num_clients)}
        return dataclasses.replace(base, personal=personal)

    def client_start(self, state, client_id):
        own_b = state.personal[client_id]
        return tuple(layer.with_factors(b=b) for layer, b in zip(state.layers, own_b))

    def aggregate(self, state, client_ids, client_layers, weights):
        new_layers, reports = [], []
        personal = dict(state.personal)
        merged_per_layer = []
        for idx in range(len(state.layers)):
            states = self._per_layer(client_layers, idx)
            merged = baselines.fedsa_aggregate(states, weights)
            merged_per_layer.append(merged)
            a_global = merged[0].a
            served = [s.b @ a_global for s in states]
            err = frobenius(
                sum(w * m for w, m in zip(weights, served)) - baselines.mean_product(states, weights)
            )
            new_layers.append(state.layers[idx].with_factors(a=a_global))
            reports.append(LayerReport(agg_error=err))
        for pos, cid in enumerate(client_ids):
            personal[cid] = tuple(merged_per_layer[idx][pos].b for idx in range(len(state.layers)))
        return GlobalState(layers=tuple(new_layers), personal=personal), reports

    def eval_models(self, state):
        return [self.client_start(state, cid) for cid in sorted(state.personal)]

    def trainable_grads(self, layer, g_full):
        return list(baselines.lora_grads(layer, g_full))

    def upload(self, layer):
        return {"a": layer.a}

    def uplink_params(self, d_out, d_in):
        return self.rank * d_in


class FedExScheme(LoraScheme):
    """FedEx-LoRA: FedIT averages plus the exact residual folded into the broadcast frozen weight."""

    scheme_id = SchemeId.FEDEX_LORA

    def aggregate(self, state, client_ids, client_layers, weights):
        new_layers, reports = [], []
        for idx in range(len(state.layers)):
            states = self._per_layer(client_layers, idx)
            avg, residual = baselines.fedex_aggregate(states, weights)
            folded = baselines.fold_residual(avg, residual)
            err = frobenius(avg.b @ avg.a + residual - baselines.mean_product(states, weights))
            new_layers.append(folded)
            reports.append(LayerReport(agg_error=err))
        return dataclasses.replace(state, layers=tuple(new_layers)), reports

    def download(self, layer):
        return {"b": layer.b, "a": layer.a, "w0": layer.w0}

    def downlink_params(self, d_out, d_in):
        return self.rank * (d_out + d_in) + d_out * d_in


SCHEMES: Dict[SchemeId, Type[Scheme]] = {
    SchemeId.FLORG: FlorgScheme,
    SchemeId.FEDIT: FedItScheme,
    SchemeId.FEDERA: FederaScheme,
    SchemeId.FFA_LORA: FfaScheme,
    SchemeId.FEDSA_LORA: FedSaScheme,
    SchemeId.FEDEX_LORA: FedExScheme,
}


def make_scheme(
    scheme_id: SchemeId, rank: int, alpha: float, seed: int,
    init_scheme: InitScheme = InitScheme.SEMI_ORTHOGONAL, align: bool = True,
) -> Scheme:
    scheme_id = SchemeId(scheme_id)
    if scheme_id not in SCHEMES:
        raise ContractViolation(f"unknown scheme {scheme_id!r}")
    if scheme_id is SchemeId.FLORG:
        return FlorgScheme(rank, alpha, seed, init_scheme, align=align)
    return SCHEMES[scheme_id](rank, alpha, seed, init_scheme)


def payload_params(payload: Payload) -> int:
    return int(sum(m.size for m in payload.values()))
