import warnings

import numpy as np
import pytest

from florg_sim.adapter import AdapterConfig, init_adapter
from florg_sim.errors import ContractViolation, DivergenceError
from florg_sim.linalg import frobenius, orthonormalize_columns
from florg_sim.server_core import (
    CanonicalFactor, aggregate_gram, alignment_residual, apply_alignment, assemble_full, decompose,
    gram_aggregation_error, identity_alignment, procrustes_align, server_flops, server_update,
    truncate_factor,
)


def _locals(rng, n=3, r=2, k=6):
    return [rng.standard_normal((r, k)) for _ in range(n)]


def test_aggregate_gram_is_weighted_gram_mean(rng):
    locals_ = _locals(rng)
    weights = [0.5, 0.3, 0.2]
    agg = aggregate_gram(locals_, weights)

    expected = sum(w * a.T @ a for w, a in zip(weights, locals_))
    np.testing.assert_allclose(agg.q, expected, atol=1e-12)
    assert agg.effective_rank == 6
    assert agg.rank_bound == 6
    assert gram_aggregation_error(locals_, weights, agg) <= 1e-12


def test_overflowing_gram_is_divergence_not_a_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(DivergenceError, match="non-finite"):
            aggregate_gram([np.full((2, 4), 1e160)] * 2)


def test_effective_rank_is_bounded_by_clients_times_rank(rng):
    agg = aggregate_gram(_locals(rng, n=2, r=1, k=8))
    assert agg.rank_bound == 2
    assert agg.effective_rank == 2


@pytest.mark.parametrize("weights", [[0.5, 0.4, 0.2], [1.0, 0.0], [-0.5, 1.0, 0.5]])
def test_aggregate_gram_rejects_bad_weights(rng, weights):
    with pytest.raises(ContractViolation):
        aggregate_gram(_locals(rng), weights)


def test_aggregate_gram_rejects_mixed_shapes(rng):
    with pytest.raises(ContractViolation, match="client 1"):
        aggregate_gram([rng.standard_normal((2, 4)), rng.standard_normal((3, 4))])
    with pytest.raises(ContractViolation):
        aggregate_gram([])


def test_canonical_factor_preserves_gram(rng):
    agg = aggregate_gram(_locals(rng, n=2, r=2, k=6))
    factor = decompose(agg)
    assert factor.rank == 4
    np.testing.assert_allclose(factor.a_tilde.T @ factor.a_tilde, agg.q, atol=1e-10)
    row_energy = np.sum(factor.a_tilde ** 2, axis=1)
    assert np.all(np.diff(row_energy) <= 1e-12)


def test_truncation_drops_lowest_energy(rng):
    factor = decompose(aggregate_gram(_locals(rng, n=3, r=2, k=6)))
    truncated = truncate_factor(factor, 2)

    assert truncated.rank == 2
    assert truncated.truncation_loss == pytest.approx(float(np.sum(factor.eigenvalues[2:])))
    np.testing.assert_array_equal(truncated.a_tilde, factor.a_tilde[:2])
    assert truncate_factor(factor, 10) is factor
    with pytest.raises(ContractViolation):
        truncate_factor(factor, 0)


def test_procrustes_is_semi_orthogonal_and_optimal(rng):
    a_prev = rng.standard_normal((4, 6))
    factor = decompose(aggregate_gram(_locals(rng, n=1, r=3, k=6)))
    result = procrustes_align(a_prev, factor)

    assert result.s_star.shape == (4, 3)
    np.testing.assert_allclose(result.s_star.T @ result.s_star, np.eye(3), atol=1e-10)
    assert result.delta_proc == 0.0
    identity = identity_alignment(4, 3)
    assert result.residual <= alignment_residual(a_prev, factor.a_tilde, identity) + 1e-12
    for _ in range(50):
        q, _ = np.linalg.qr(rng.standard_normal((4, 3)))
        assert result.residual <= alignment_residual(a_prev, factor.a_tilde, q) + 1e-9


def test_apply_alignment_reports_drift(rng):
    a_prev = rng.standard_normal((3, 5))
    factor = decompose(aggregate_gram(_locals(rng, n=2, r=3, k=5)))
    factor = truncate_factor(factor, 3)
    result = apply_alignment(a_prev, factor, identity_alignment(3, 3))

    assert result.delta_proc >= 0.0
    assert result.delta_proc == pytest.approx(result.residual - result.optimal_residual, abs=1e-12)
    np.testing.assert_array_equal(result.a_next, factor.a_tilde)


@pytest.mark.parametrize("scale", [1e-3, 0.1, 1.0, None])
def test_alignment_distance_is_bounded_by_drift(rng, scale):
    for _ in range(20):
        a_prev = rng.standard_normal((4, 7))
        a_tilde = rng.standard_normal((3, 7))
        factor = CanonicalFactor(a_tilde=a_tilde, eigenvalues=np.sum(a_tilde * a_tilde, axis=1))
        s_star = procrustes_align(a_prev, factor).s_star
        if scale is None:
            s = orthonormalize_columns(rng.standard_normal((4, 3)))
        else:
            s = orthonormalize_columns(s_star + scale * rng.standard_normal((4, 3)))
        result = apply_alignment(a_prev, factor, s)
        assert result.alignment_bound_defined
        bound = result.delta_proc / result.sigma_min_cross
        assert frobenius(s - result.s_star) ** 2 <= bound + 1e-9 * max(1.0, bound)


def test_alignment_distance_bound_is_tight_for_rank_one():
    a_prev = np.array([[2.0, 0.0, 0.0]])
    factor = CanonicalFactor(a_tilde=np.array([[1.0, 0.0, 0.0]]), eigenvalues=np.array([1.0]))
    result = apply_alignment(a_prev, factor, np.array([[-1.0]]))
    # ||S - S*||^2 = 4, residual 9 - 1 = 8, sigma_min = 2
    assert result.delta_proc == pytest.approx(8.0)
    assert frobenius(result.s_applied - result.s_star) ** 2 == pytest.approx(result.delta_proc / result.sigma_min_cross)


def test_identity_alignment_needs_room():
    np.testing.assert_array_equal(identity_alignment(3, 2), np.eye(3, 2))
    with pytest.raises(ContractViolation):
        identity_alignment(2, 3)


def test_zero_cross_matrix_is_undefined_for_drift():
    a_prev = np.array([[1.0, 0.0, 0.0]])
    factor = CanonicalFactor(a_tilde=np.array([[0.0, 2.0, 0.0]]), eigenvalues=np.array([4.0]))
    result = procrustes_align(a_prev, factor)
    assert result.sigma_min_cross == 0.0
    assert not result.alignment_bound_defined
    np.testing.assert_allclose(result.s_star.T @ result.s_star, np.eye(1))


def test_single_client_returning_broadcast_is_a_fixed_point(rng):
    a_prev = rng.standard_normal((3, 7))
    report = server_update(a_prev, [a_prev.copy()])
    np.testing.assert_allclose(report.a_next, a_prev, atol=1e-9)
    assert report.alignment.delta_proc == 0.0
    assert report.gram_preservation_err <= 1e-12


@pytest.mark.parametrize("align", [True, False])
def test_server_update_preserves_gram_up_to_truncation(rng, align):
    a_prev = rng.standard_normal((2, 6))
    locals_ = _locals(rng, n=4, r=2, k=6)
    report = server_update(a_prev, locals_, target_r=2, align=align)

    q = report.aggregate.q
    a_next = report.a_next
    assert a_next.shape == (2, 6)
    lost = np.sum(report.aggregate.eigen.values[2:])
    assert report.factor.truncation_loss == pytest.approx(float(lost))
    # Gram of the result is the rank-2 part of q.
    vecs = report.aggregate.eigen.vectors[:2]
    best = vecs.T @ np.diag(report.aggregate.eigen.values[:2]) @ vecs
    np.testing.assert_allclose(a_next.T @ a_next, best, atol=1e-9)
    assert report.gram_preservation_err == pytest.approx(
        np.linalg.norm(a_next.T @ a_next - q) / np.linalg.norm(q)
    )
    if align:
        assert report.alignment.delta_proc == 0.0
    else:
        assert report.alignment.delta_proc >= 0.0


def test_server_flops_formula():
    assert server_flops(num_clients=4, r=2, k=8, r_prime=3) == 4 * 2 * 64 + 512 + 8 * 2 * 3 + 4 * 3


def test_assemble_full_perturbation_norm_on_square_layer(rng):
    cfg = AdapterConfig(d_out=6, d_in=6, r=2, alpha=8.0, seed=5)
    state = init_adapter(cfg, rng.standard_normal((6, 6)))
    a_next = rng.standard_normal((2, 6))
    full = assemble_full(state, a_next)
    expected = cfg.scale * np.linalg.norm(a_next.T @ a_next)
    assert np.linalg.norm(full - state.w0) == pytest.approx(expected, rel=1e-12)
