"""
Property suite behind `florg-sim verify`.

Every property draws fresh seeds from OS entropy; the entropy is reported so a
failing run can be replayed with `--entropy`. Kernels under test are passed in
as arguments, which lets a test plant a broken kernel and watch the matching
property fail.
"""

import math
import time
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, List, Optional, Tuple

import numpy as np

from .adapter import AdapterConfig, InitScheme, delta_w, grad_a, init_adapter, local_update
from .baselines import (
    LoraState, SchemeId, aggregation_error, fedex_aggregate, federa_aggregate, init_lora,
    lora_grads, mean_product,
)
from .checkpoint import BYTES_PER_PARAM, encode_payload
from .diagnostics import BoundRecord, estimate_smoothness, omega, theorem2_diagnostics
from .federation import Experiment, ExperimentConfig, RoundMetrics
from .linalg import (
    Matrix, frobenius, matmul, orthonormal_columns, orthonormalize_columns, sym_eig, thin_svd,
)
from .schemes import FedSaScheme, FfaScheme, Payload, make_scheme, payload_params
from .server_core import (
    CanonicalFactor, aggregate_gram, alignment_residual, apply_alignment, decompose, procrustes_align,
    server_update, truncate_factor, uniform_weights,
)
from .tasks import TaskSpec, dirichlet_partition
from . import mylogger

logger = mylogger.get_logger(__name__)

AlignFn = Callable[[Matrix, Matrix], Matrix]
DiagnosticsFn = Callable[..., List[BoundRecord]]


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass(frozen=True)
class VerifyProfile:
    orthonormal_seeds: int
    procrustes_instances: int
    drift_instances: int
    procrustes_candidates: int
    grad_checks: int
    pipeline_runs: int
    linalg_trials: int
    partition_trials: int
    bias_rounds: int
    convergence_seeds: int
    convergence_min_pass: int
    convergence_rounds: int
    convergence_samples: int
    ablation_seeds: int
    ablation_min_pass: int
    ablation_rounds: int
    ablation_samples: int


FULL = VerifyProfile(
    orthonormal_seeds=500, procrustes_instances=1000, drift_instances=1000,
    procrustes_candidates=500, grad_checks=100, pipeline_runs=500,
    linalg_trials=500, partition_trials=50, bias_rounds=100,
    convergence_seeds=10, convergence_min_pass=9, convergence_rounds=500, convergence_samples=1024,
    ablation_seeds=10, ablation_min_pass=8, ablation_rounds=30, ablation_samples=512,
)

QUICK = VerifyProfile(
    orthonormal_seeds=100, procrustes_instances=100, drift_instances=100,
    procrustes_candidates=100, grad_checks=20, pipeline_runs=60,
    linalg_trials=30, partition_trials=10, bias_rounds=20,
    convergence_seeds=2, convergence_min_pass=2, convergence_rounds=300, convergence_samples=512,
    ablation_seeds=2, ablation_min_pass=2, ablation_rounds=10, ablation_samples=256,
)

# Realizable recovery task used by the convergence and ablation properties.
RECOVERY_ETA = 3e-4


def default_align(a_prev: Matrix, a_tilde: Matrix) -> Matrix:
    factor = CanonicalFactor(a_tilde=a_tilde, eigenvalues=np.sum(a_tilde * a_tilde, axis=1))
    return procrustes_align(a_prev, factor).s_star


def _relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(exact))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(exact), 1e-3 * scale), 1e-8)
    return float(np.max(np.abs(approx - exact) / denom))


# ============================================================================
# LINEAR ALGEBRA AND SERVER PROPERTIES
# ============================================================================

def check_procrustes_optimality(
    rng: np.random.Generator, profile: VerifyProfile, align_fn: AlignFn = default_align,
) -> PropertyResult:
    """S* reaches the nuclear norm of A_prev A~^T and beats random semi-orthogonal alignments."""
    worst_trace_gap = 0.0
    beaten = 0
    for _ in range(profile.procrustes_instances):
        r = int(rng.integers(1, 7))
        r_prime = int(rng.integers(1, r + 1))
        k = int(rng.integers(1, 13))
        a_prev = rng.standard_normal((r, k))
        a_tilde = rng.standard_normal((r_prime, k))
        s = align_fn(a_prev, a_tilde)
        cross = a_prev @ a_tilde.T
        nuclear = float(np.sum(np.linalg.svd(cross, compute_uv=False)))
        worst_trace_gap = max(worst_trace_gap, abs(float(np.sum(s * cross)) - nuclear))

        residual = alignment_residual(a_prev, a_tilde, s)
        gauss = rng.standard_normal((profile.procrustes_candidates, r, r_prime))
        candidates, _ = np.linalg.qr(gauss)
        diffs = np.einsum("nij,jk->nik", candidates, a_tilde) - a_prev
        candidate_residuals = np.sum(diffs * diffs, axis=(1, 2))
        if np.any(candidate_residuals < residual - 1e-9 * max(1.0, residual)):
            beaten += 1
    passed = worst_trace_gap <= 1e-10 and beaten == 0
    return PropertyResult(
        "procrustes_optimality", passed,
        f"max |tr(S^T M) - sum sigma| = {worst_trace_gap:.3e}; instances beaten by a random S: {beaten}",
    )


def check_sym_eig(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    worst_recon = 0.0
    worst_orth = 0.0
    ordered = True
    for _ in range(profile.linalg_trials):
        n = int(rng.integers(1, 13))
        rank = int(rng.integers(0, n + 1))
        b = rng.standard_normal((rank, n))
        q = b.T @ b
        eig = sym_eig(q)
        recon = eig.vectors.T @ np.diag(eig.values) @ eig.vectors
        scale = max(frobenius(q), 1.0)
        worst_recon = max(worst_recon, frobenius(recon - q) / scale)
        worst_orth = max(worst_orth, frobenius(eig.vectors @ eig.vectors.T - np.eye(n)))
        ordered &= bool(np.all(np.diff(eig.values) <= 0)) and bool(np.all(eig.values >= 0))
    passed = worst_recon <= 1e-10 and worst_orth <= 1e-10 and ordered
    return PropertyResult(
        "sym_eig_reconstruction", passed,
        f"max recon err {worst_recon:.3e}, max orthogonality err {worst_orth:.3e}, ordered={ordered}",
    )


def check_thin_svd(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    worst_recon = 0.0
    worst_orth = 0.0
    for _ in range(profile.linalg_trials):
        rows = int(rng.integers(1, 11))
        cols = int(rng.integers(1, 11))
        rank = int(rng.integers(0, min(rows, cols) + 1))
        m = rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))
        svd = thin_svd(m)
        c = min(rows, cols)
        worst_recon = max(worst_recon, frobenius(svd.reconstruct() - m) / max(frobenius(m), 1.0))
        worst_orth = max(
            worst_orth,
            frobenius(svd.u.T @ svd.u - np.eye(c)),
            frobenius(svd.v.T @ svd.v - np.eye(c)),
        )
    passed = worst_recon <= 1e-9 and worst_orth <= 1e-9
    return PropertyResult(
        "thin_svd_reconstruction", passed,
        f"max recon err {worst_recon:.3e}, max orthogonality err {worst_orth:.3e}",
    )


def check_orthonormal_columns(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    worst = 0.0
    for _ in range(profile.orthonormal_seeds):
        cols = int(rng.integers(1, 17))
        rows = int(rng.integers(cols, 17))
        m = orthonormal_columns(rows, cols, int(rng.integers(0, 2 ** 62)))
        worst = max(worst, frobenius(m.T @ m - np.eye(cols)))
    return PropertyResult(
        "orthonormal_columns", worst <= 1e-12,
        f"max ||M^T M - I||_F over {profile.orthonormal_seeds} seeds: {worst:.3e}",
    )


def check_matmul_determinism(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    mismatches = 0
    for _ in range(profile.linalg_trials):
        n, m, p = (int(v) for v in rng.integers(1, 17, size=3))
        a = rng.standard_normal((n, m))
        b = rng.standard_normal((m, p))
        first = matmul(a, b).tobytes()
        mismatches += any(matmul(a, b).tobytes() != first for _ in range(3))
    return PropertyResult(
        "matmul_determinism", mismatches == 0,
        f"products differing bitwise across repeated calls: {mismatches}/{profile.linalg_trials}",
    )


def check_svd_matches_eig(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """sigma_j^2 of thin_svd(M) equals the j-th eigenvalue of M^T M, relative to sigma_max^2."""
    worst = 0.0
    for _ in range(profile.linalg_trials):
        rows = int(rng.integers(1, 17))
        cols = int(rng.integers(1, 17))
        rank = int(rng.integers(0, min(rows, cols) + 1))
        m = rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))
        sigma = thin_svd(m).sigma
        values = sym_eig(m.T @ m).values[:sigma.size]
        scale = float(sigma[0]) ** 2 if sigma.size and sigma[0] > 0 else 1.0
        worst = max(worst, float(np.max(np.abs(sigma ** 2 - values))) / scale)
    return PropertyResult(
        "svd_matches_eig", worst <= 1e-8,
        f"max |sigma^2 - lambda(M^T M)| / sigma_max^2 = {worst:.3e}",
    )


def check_gram_pipeline(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """Effective rank stays within min(k, N r); Gram is preserved when nothing is truncated."""
    rank_violations = 0
    worst_gram = 0.0
    for _ in range(profile.pipeline_runs):
        n = int(rng.integers(1, 6))
        k = int(rng.integers(2, 11))
        r = int(rng.integers(1, min(k, 4) + 1))
        locals_ = [rng.standard_normal((r, k)) for _ in range(n)]
        report = server_update(rng.standard_normal((r, k)), locals_)
        agg = report.aggregate
        if agg.effective_rank > min(k, n * r):
            rank_violations += 1
        if agg.effective_rank <= r:
            worst_gram = max(worst_gram, report.gram_preservation_err)
    passed = rank_violations == 0 and worst_gram <= 1e-9
    return PropertyResult(
        "gram_preservation_and_rank_bound", passed,
        f"rank-bound violations {rank_violations}; max relative Gram error {worst_gram:.3e}",
    )


def check_truncation_optimality(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """The truncated Gram is the best rank-r PSD approximation of q over every eigen-subset."""
    worst = 0.0
    for _ in range(profile.linalg_trials):
        k = int(rng.integers(2, 7))
        r = int(rng.integers(1, k + 1))
        n = int(rng.integers(1, 4))
        agg = aggregate_gram([rng.standard_normal((r, k)) for _ in range(n)])
        target = int(rng.integers(1, k + 1))
        factor = truncate_factor(decompose(agg), target)
        ours = frobenius(factor.a_tilde.T @ factor.a_tilde - agg.q)

        values, vectors = np.linalg.eigh(agg.q)
        best = math.inf
        for subset in combinations(range(k), target):
            idx = list(subset)
            approx = (vectors[:, idx] * values[idx]) @ vectors[:, idx].T
            best = min(best, frobenius(approx - agg.q))
        worst = max(worst, (ours - best) / max(frobenius(agg.q), 1.0))
    return PropertyResult(
        "truncation_optimality", worst <= 1e-9,
        f"max excess over the exhaustive eigen-subset optimum: {worst:.3e}",
    )


def check_alignment_drift_bound(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """||S - S*||_F^2 <= delta_proc / sigma_min(A~ A_prev^T) for feasible S near and far from S*."""
    checked = 0
    violations = 0
    negative = 0
    worst_slack = -math.inf
    for _ in range(profile.drift_instances):
        r = int(rng.integers(1, 7))
        r_prime = int(rng.integers(1, r + 1))
        k = int(rng.integers(r_prime, 13))
        a_prev = rng.standard_normal((r, k))
        a_tilde = rng.standard_normal((r_prime, k))
        factor = CanonicalFactor(a_tilde=a_tilde, eigenvalues=np.sum(a_tilde * a_tilde, axis=1))
        s_star = procrustes_align(a_prev, factor).s_star
        if rng.random() < 0.5:
            noise = float(rng.uniform(1e-2, 1.0)) * rng.standard_normal((r, r_prime))
            s = orthonormalize_columns(s_star + noise)
        else:
            s = orthonormalize_columns(rng.standard_normal((r, r_prime)))
        result = apply_alignment(a_prev, factor, s)
        negative += result.delta_proc < 0
        if not result.alignment_bound_defined:
            continue
        checked += 1
        gap = frobenius(s - result.s_star) ** 2
        bound = result.delta_proc / result.sigma_min_cross
        worst_slack = max(worst_slack, gap - bound)
        violations += gap > bound + 1e-9 * max(1.0, bound)
    passed = violations == 0 and negative == 0 and checked > 0
    return PropertyResult(
        "alignment_drift_bound", passed,
        f"{checked} defined instances, {violations} bound violations, {negative} negative drifts; "
        f"max ||S - S*||^2 - bound = {worst_slack:.3e}",
    )


# ============================================================================
# GRADIENTS
# ============================================================================

def check_gradients(rng: np.random.Generator, profile: VerifyProfile, h: float = 1e-6) -> PropertyResult:
    """Central differences of <G, delta_W> against grad_a and lora_grads."""
    worst_florg = 0.0
    worst_lora = 0.0
    for trial in range(profile.grad_checks):
        d_out = int(rng.integers(2, 9))
        d_in = int(rng.integers(2, 9))
        k = min(d_out, d_in)
        r = int(rng.integers(1, k + 1))
        w0 = rng.standard_normal((d_out, d_in))
        g = rng.standard_normal((d_out, d_in))
        cfg = AdapterConfig(d_out=d_out, d_in=d_in, r=r, alpha=float(rng.uniform(1, 16)), seed=trial)
        state = init_adapter(cfg, w0)

        def florg_objective(a: Matrix) -> float:
            return float(np.sum(g * delta_w(state.with_a(a))))

        numeric = np.zeros_like(state.a)
        for idx in np.ndindex(*state.a.shape):
            bump = np.zeros_like(state.a)
            bump[idx] = h
            numeric[idx] = (florg_objective(state.a + bump) - florg_objective(state.a - bump)) / (2 * h)
        worst_florg = max(worst_florg, _relative_error(numeric, grad_a(state, g)))

        lora = init_lora(w0, r, cfg.alpha, trial).with_factors(b=rng.standard_normal((d_out, r)))
        analytic_b, analytic_a = lora_grads(lora, g)

        def lora_objective(b: Matrix, a: Matrix) -> float:
            return float(np.sum(g * lora.with_factors(b=b, a=a).delta_w()))

        numeric_b = np.zeros_like(lora.b)
        for idx in np.ndindex(*lora.b.shape):
            bump = np.zeros_like(lora.b)
            bump[idx] = h
            numeric_b[idx] = (lora_objective(lora.b + bump, lora.a) - lora_objective(lora.b - bump, lora.a)) / (2 * h)
        numeric_a = np.zeros_like(lora.a)
        for idx in np.ndindex(*lora.a.shape):
            bump = np.zeros_like(lora.a)
            bump[idx] = h
            numeric_a[idx] = (lora_objective(lora.b, lora.a + bump) - lora_objective(lora.b, lora.a - bump)) / (2 * h)
        worst_lora = max(worst_lora, _relative_error(numeric_b, analytic_b), _relative_error(numeric_a, analytic_a))
    passed = worst_florg <= 1e-5 and worst_lora <= 1e-5
    return PropertyResult(
        "gradient_finite_differences", passed,
        f"max relative error grad_a {worst_florg:.3e}, lora_grads {worst_lora:.3e}",
    )


def _random_adapter_config(rng: np.random.Generator) -> AdapterConfig:
    d_out = int(rng.integers(2, 13))
    d_in = int(rng.integers(2, 13))
    schemes = list(InitScheme)
    return AdapterConfig(
        d_out=d_out, d_in=d_in, r=int(rng.integers(1, min(d_out, d_in) + 1)),
        alpha=float(rng.uniform(1, 16)), init_scheme=schemes[int(rng.integers(len(schemes)))],
        seed=int(rng.integers(0, 2 ** 31)),
    )


def check_delta_w_homogeneity(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """Scaling A by c scales delta_W by c^2."""
    worst = 0.0
    for _ in range(profile.linalg_trials):
        cfg = _random_adapter_config(rng)
        state = init_adapter(cfg, rng.standard_normal((cfg.d_out, cfg.d_in)))
        c = float(rng.uniform(0.1, 10.0)) * (1.0 if rng.random() < 0.5 else -1.0)
        expected = c * c * delta_w(state)
        scaled = delta_w(state.with_a(c * state.a))
        worst = max(worst, frobenius(scaled - expected) / max(frobenius(expected), 1e-300))
    return PropertyResult(
        "delta_w_homogeneity", worst <= 1e-12,
        f"max ||delta_W(cA) - c^2 delta_W(A)|| / ||c^2 delta_W(A)|| = {worst:.3e}",
    )


def check_frozen_state(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """Initialization is a function of the config; W0, L and R never change under local steps."""
    unstable_init = 0
    mutated = 0
    for _ in range(profile.grad_checks):
        cfg = _random_adapter_config(rng)
        w0 = rng.standard_normal((cfg.d_out, cfg.d_in))
        state = init_adapter(cfg, w0)
        twin = init_adapter(cfg, w0)
        frozen = (state.w0, state.l_basis, state.r_basis)
        unstable_init += any(
            x.tobytes() != y.tobytes()
            for x, y in zip(frozen + (state.a,), (twin.w0, twin.l_basis, twin.r_basis, twin.a))
        )
        snapshot = [m.tobytes() for m in frozen]
        current = state
        for _ in range(5):
            g = rng.standard_normal((cfg.d_out, cfg.d_in))
            current = current.with_a(local_update(current, g, 1e-3))
        after = (current.w0, current.l_basis, current.r_basis)
        mutated += [m.tobytes() for m in after] != snapshot or any(m.flags.writeable for m in after)
    passed = unstable_init == 0 and mutated == 0
    return PropertyResult(
        "frozen_state", passed,
        f"non-reproducible initializations: {unstable_init}; frozen arrays changed or writeable: {mutated}",
    )


# ============================================================================
# BASELINES AND PARTITIONING
# ============================================================================

def check_baseline_aggregation(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """FedEx is exact, FeDeRA is the best rank-r approximation, FedIT is biased on the 2-client construction."""
    w0 = np.zeros((2, 2))
    base = init_lora(w0, 1, 1.0, 0)
    bias_states = [
        base.with_factors(b=np.array([[1.0], [0.0]]), a=np.array([[1.0, 0.0]])),
        base.with_factors(b=np.array([[0.0], [1.0]]), a=np.array([[0.0, 1.0]])),
    ]
    fedit_bias = aggregation_error(bias_states)

    worst_fedex = 0.0
    worst_federa = 0.0
    for _ in range(profile.linalg_trials):
        d = int(rng.integers(2, 9))
        r = int(rng.integers(1, d + 1))
        n = int(rng.integers(1, 5))
        lora = init_lora(np.zeros((d, d)), r, 1.0, 0)
        states: List[LoraState] = [
            lora.with_factors(b=rng.standard_normal((d, r)), a=rng.standard_normal((r, d))) for _ in range(n)
        ]
        target = mean_product(states)
        scale = max(frobenius(target), 1.0)
        avg, residual = fedex_aggregate(states)
        worst_fedex = max(worst_fedex, frobenius(avg.b @ avg.a + residual - target) / scale)

        merged = federa_aggregate(states, r)
        u, s, vt = np.linalg.svd(target)
        best = (u[:, :r] * s[:r]) @ vt[:r]
        worst_federa = max(worst_federa, frobenius(merged.b @ merged.a - best) / scale)
    passed = fedit_bias > 0.1 and worst_fedex <= 1e-12 and worst_federa <= 1e-9
    return PropertyResult(
        "baseline_aggregation", passed,
        f"FedIT bias {fedit_bias:.3e}; FedEx exactness {worst_fedex:.3e}; FeDeRA vs Eckart-Young {worst_federa:.3e}",
    )


def _train_clients(scheme, state, client_ids, rng, shape) -> list:
    client_layers = []
    for cid in client_ids:
        layers = scheme.client_start(state, cid)
        for _ in range(3):
            layers = scheme.local_step(layers, [rng.standard_normal(shape)], 1e-2, 1, cid)
        client_layers.append(layers)
    return client_layers


def check_factor_locality(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """FFA's a and FedSA's per-client b are never uploaded and come back from the server bit-identical."""
    violations = []
    for trial in range(profile.partition_trials):
        d_out = int(rng.integers(2, 9))
        d_in = int(rng.integers(2, 9))
        r = int(rng.integers(1, min(d_out, d_in) + 1))
        n = int(rng.integers(2, 6))
        w0 = rng.standard_normal((d_out, d_in))

        ffa = FfaScheme(r, 4.0, trial)
        state = ffa.init_global([w0], n)
        frozen_a = state.layers[0].a.tobytes()
        client_layers = _train_clients(ffa, state, range(n), rng, w0.shape)
        if any(layers[0].a.tobytes() != frozen_a for layers in client_layers):
            violations.append(f"trial {trial}: FFA client moved a")
        if "a" in ffa.upload(client_layers[0][0]):
            violations.append(f"trial {trial}: FFA uploads a")
        merged, _ = ffa.aggregate(state, list(range(n)), client_layers, uniform_weights(n))
        if merged.layers[0].a.tobytes() != frozen_a:
            violations.append(f"trial {trial}: FFA server changed a")

        fedsa = FedSaScheme(r, 4.0, trial)
        state = fedsa.init_global([w0], n)
        count = int(rng.integers(1, n + 1))
        participants = sorted(int(c) for c in rng.choice(n, size=count, replace=False))
        client_layers = _train_clients(fedsa, state, participants, rng, w0.shape)
        if any("b" in fedsa.upload(layers[0]) for layers in client_layers):
            violations.append(f"trial {trial}: FedSA uploads b")
        merged, _ = fedsa.aggregate(state, participants, client_layers, uniform_weights(count))
        for pos, cid in enumerate(participants):
            if merged.personal[cid][0].tobytes() != client_layers[pos][0].b.tobytes():
                violations.append(f"trial {trial}: FedSA server changed client {cid}'s b")
        for cid in set(range(n)) - set(participants):
            if merged.personal[cid][0].tobytes() != state.personal[cid][0].tobytes():
                violations.append(f"trial {trial}: FedSA touched idle client {cid}'s b")
    return PropertyResult(
        "factor_locality", not violations,
        f"violations: {violations[:3] or 'none'}",
    )


def check_partition(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """Shards are disjoint, cover the data, and lower rho gives more label skew."""
    def mean_entropy(labels: np.ndarray, rho: float, seed: int) -> float:
        entropies = []
        for shard in dirichlet_partition(labels, 10, rho, seed):
            counts = np.bincount(labels[shard.indices], minlength=4).astype(float)
            p = counts[counts > 0] / counts.sum()
            entropies.append(float(-np.sum(p * np.log(p))))
        return float(np.mean(entropies))

    labels = np.arange(800) % 4
    covered = True
    low, high = [], []
    for _ in range(profile.partition_trials):
        seed = int(rng.integers(0, 2 ** 31))
        shards = dirichlet_partition(labels, 10, 0.5, seed)
        joined = np.concatenate([s.indices for s in shards])
        covered &= joined.size == labels.size and np.unique(joined).size == labels.size
        covered &= all(s.sample_count >= 1 for s in shards)
        low.append(mean_entropy(labels, 0.1, seed))
        high.append(mean_entropy(labels, 1.0, seed))
    skew_ok = float(np.mean(low)) < float(np.mean(high))
    return PropertyResult(
        "dirichlet_partition", bool(covered and skew_ok),
        f"conservation={bool(covered)}; mean label entropy rho=0.1: {np.mean(low):.3f} < rho=1.0: {np.mean(high):.3f}",
    )


def _encoded_data_bytes(payload: Payload) -> int:
    """Bytes of fp64 data in the encoded payload: total size minus per-matrix name and shape headers."""
    headers = sum(2 + len(name.encode("utf-8")) + 8 for name in payload)
    return len(encode_payload(payload)) - headers


def check_communication(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """Analytic counters agree with encoded payload sizes, and the per-layer ordering holds."""
    d, r = int(rng.integers(8, 33)), 4
    rect = (int(rng.integers(r, 33)), int(rng.integers(r, 33)))
    mismatches = []
    up = {}
    down = {}
    for shape in ((d, d), rect):
        w0 = rng.standard_normal(shape)
        for scheme_id in SchemeId:
            scheme = make_scheme(scheme_id, r, 16.0, 0)
            layer = scheme.init_global([w0], 2).layers[0]
            uplink = scheme.uplink_params(*shape)
            downlink = scheme.downlink_params(*shape)
            if shape == (d, d):
                up[scheme_id] = uplink
                down[scheme_id] = downlink
            for direction, payload, counted in (
                ("uplink", scheme.upload(layer), uplink), ("downlink", scheme.download(layer), downlink),
            ):
                if payload_params(payload) != counted or _encoded_data_bytes(payload) != BYTES_PER_PARAM * counted:
                    mismatches.append(f"{scheme_id.value} {direction} {shape[0]}x{shape[1]}")
    ordering = (
        up[SchemeId.FFA_LORA] <= up[SchemeId.FEDSA_LORA] <= up[SchemeId.FLORG]
        < up[SchemeId.FEDIT] == up[SchemeId.FEDERA]
        and down[SchemeId.FEDIT] < down[SchemeId.FEDEX_LORA]
    )
    half = 2 * up[SchemeId.FLORG] == up[SchemeId.FEDIT]
    fedex_ratio = down[SchemeId.FEDEX_LORA] / down[SchemeId.FLORG]
    passed = not mismatches and ordering and half and fedex_ratio >= d * d / (r * d)
    return PropertyResult(
        "communication_accounting", passed,
        f"d={d}: mismatches={mismatches or 'none'}; FLoRG = FedIT/2: {half}; FedEx/FLoRG downlink {fedex_ratio:.1f}x",
    )


# ============================================================================
# END-TO-END RUNS
# ============================================================================

def recovery_config(seed: int, num_clients: int, samples: int, rounds: int, **overrides) -> ExperimentConfig:
    task = TaskSpec(d_out=32, d_in=32, num_samples=samples, num_eval_samples=256, true_rank=2, noise_std=0.0, seed=seed)
    fields = dict(
        task=task, scheme=SchemeId.FLORG, num_clients=num_clients, rounds=rounds, eta=RECOVERY_ETA,
        rank=4, alpha=16.0, dirichlet_rho=0.5, seed=seed, log_every=max(rounds, 1),
    )
    fields.update(overrides)
    return ExperimentConfig(**fields)


def _run_until(cfg: ExperimentConfig, target_ratio: Optional[float] = None) -> Tuple[Experiment, List[RoundMetrics]]:
    experiment = Experiment(cfg)
    rows = []
    for round_idx in range(1, cfg.rounds + 1):
        rows.append(experiment.run_round(round_idx))
        if target_ratio is not None and rows[-1].global_loss <= target_ratio * experiment.initial_loss:
            break
    return experiment, rows


def check_aggregation_bias_free(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    seed = int(rng.integers(0, 2 ** 31))
    cfg = recovery_config(seed, num_clients=2, samples=64, rounds=profile.bias_rounds, dirichlet_rho=0.1)
    _, rows = _run_until(cfg)
    worst = max(row.agg_error for row in rows)
    return PropertyResult(
        "florg_aggregation_bias_free", worst <= 1e-12,
        f"max FLoRG Gram aggregation error over {len(rows)} rounds: {worst:.3e}",
    )


def check_convergence(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    reached = 0
    worst_ratio = 0.0
    for _ in range(profile.convergence_seeds):
        seed = int(rng.integers(0, 2 ** 31))
        cfg = recovery_config(seed, 4, profile.convergence_samples, profile.convergence_rounds)
        experiment, rows = _run_until(cfg, cfg.target_loss_ratio)
        ratio = rows[-1].global_loss / experiment.initial_loss
        worst_ratio = max(worst_ratio, ratio)
        reached += ratio <= cfg.target_loss_ratio
    return PropertyResult(
        "realizable_convergence", reached >= profile.convergence_min_pass,
        f"{reached}/{profile.convergence_seeds} seeds reached 1e-3 x initial loss; worst final ratio {worst_ratio:.3e}",
    )


def check_alignment_ablation(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    """
    Align-on never loses to align-off and has zero drift; align-off reports positive drift.

    Under plain SGD the Gram trajectory does not depend on the alignment, so the two
    losses agree to rounding; the comparison allows a relative 1e-9.
    """
    wins = 0
    on_drift = 0.0
    off_positive = 0
    off_negative = False
    for _ in range(profile.ablation_seeds):
        seed = int(rng.integers(0, 2 ** 31))
        base = recovery_config(seed, 8, profile.ablation_samples, profile.ablation_rounds, dirichlet_rho=0.1)
        _, on_rows = _run_until(base)
        _, off_rows = _run_until(base.model_copy(update={"align": False}))
        on_final = on_rows[-1].global_loss
        off_final = off_rows[-1].global_loss
        wins += on_final <= off_final * (1 + 1e-9) + 1e-15
        on_drift = max(on_drift, max(row.delta_proc for row in on_rows))
        off_negative |= any(row.delta_proc < 0 for row in off_rows)
        off_positive += any(row.delta_proc > 1e-6 for row in off_rows)
    passed = wins >= profile.ablation_min_pass and on_drift <= 1e-10 and not off_negative and off_positive > 0
    return PropertyResult(
        "alignment_ablation", passed,
        f"align-on <= align-off in {wins}/{profile.ablation_seeds}; max align-on drift {on_drift:.3e}; "
        f"align-off runs with drift > 1e-6: {off_positive}",
    )


def _omega_matches(rec: BoundRecord, eta: float) -> bool:
    if rec.lambda_min is None:
        return rec.omega is None and not rec.omega_positive
    expected = omega(eta, rec.lambda_min)
    return (
        rec.omega is not None
        and math.isclose(rec.omega, expected, rel_tol=1e-12, abs_tol=1e-300)
        and rec.omega_positive == (rec.omega > 0)
    )


def _running_extrema_ok(records: List[BoundRecord]) -> bool:
    for prev, cur in zip(records, records[1:]):
        if cur.psi < prev.psi or cur.c_a < prev.c_a:
            return False
        if prev.lambda_min is not None and (cur.lambda_min is None or cur.lambda_min > prev.lambda_min):
            return False
    return True


def check_bound_diagnostics(
    rng: np.random.Generator, profile: VerifyProfile, diagnostics_fn: DiagnosticsFn = theorem2_diagnostics,
) -> PropertyResult:
    """Per-round bound terms: Omega from the running lambda_min, monotone constants, zero drift when aligned."""
    seed = int(rng.integers(0, 2 ** 31))
    cfg = recovery_config(seed, 4, profile.ablation_samples, profile.ablation_rounds)
    experiment, _ = _run_until(cfg)
    records = diagnostics_fn(
        experiment.history, cfg, estimate_smoothness(experiment.client_data), experiment.initial_train_loss,
    )
    complete = len(records) == len(experiment.history)
    omega_ok = all(_omega_matches(rec, cfg.eta) for rec in records)
    extrema_ok = _running_extrema_ok(records)
    drift_ok = all(rec.drift_term is None or rec.drift_term <= 1e-10 for rec in records)
    terms_ok = all(
        all(t is not None and math.isfinite(t) and t >= 0 for t in (rec.gap_term, rec.bias_term, rec.drift_term))
        for rec in records
        if rec.omega_positive and rec.sigma_min_cross is not None and rec.sigma_min_cross > 1e-8
    )
    passed = complete and omega_ok and extrema_ok and drift_ok and terms_ok
    return PropertyResult(
        "bound_diagnostics", passed,
        f"one record per round: {complete}; Omega consistent with lambda_min: {omega_ok}; "
        f"running constants monotone: {extrema_ok}; drift <= 1e-10 every round: {drift_ok}; "
        f"terms finite and non-negative where defined: {terms_ok}",
    )


def check_determinism(rng: np.random.Generator, profile: VerifyProfile) -> PropertyResult:
    seed = int(rng.integers(0, 2 ** 31))
    cfg = recovery_config(seed, 4, 128, 5)
    _, first = _run_until(cfg)
    _, second = _run_until(cfg)
    same = bool(np.array_equal(
        np.array([a.as_row() for a in first], dtype=np.float64),
        np.array([b.as_row() for b in second], dtype=np.float64),
        equal_nan=True,
    ))
    return PropertyResult("determinism", same, f"identical metric rows across reruns: {same}")


PROPERTIES = [
    check_orthonormal_columns,
    check_matmul_determinism,
    check_procrustes_optimality,
    check_alignment_drift_bound,
    check_sym_eig,
    check_thin_svd,
    check_svd_matches_eig,
    check_truncation_optimality,
    check_gram_pipeline,
    check_delta_w_homogeneity,
    check_frozen_state,
    check_gradients,
    check_baseline_aggregation,
    check_factor_locality,
    check_partition,
    check_communication,
    check_aggregation_bias_free,
    check_convergence,
    check_alignment_ablation,
    check_bound_diagnostics,
    check_determinism,
]


def run_suite(quick: bool = False, entropy: Optional[int] = None) -> Tuple[int, List[PropertyResult]]:
    """Run every property once with seeds spawned from `entropy` (fresh if None)."""
    profile = QUICK if quick else FULL
    seq = np.random.SeedSequence(entropy)
    children = seq.spawn(len(PROPERTIES))
    results = []
    for check, child in zip(PROPERTIES, children):
        started = time.monotonic()
        try:
            result = check(np.random.default_rng(child), profile)
        except Exception as e:  # a crashing property is a failing property
            logger.exception(f"property {check.__name__} raised")
            result = PropertyResult(check.__name__.removeprefix("check_"), False, f"raised {type(e).__name__}: {e}")
        results.append(PropertyResult(result.name, result.passed, result.detail, time.monotonic() - started))
    return int(seq.entropy), results
