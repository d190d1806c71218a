import numpy as np
import pytest
from pydantic import ValidationError

from florg_sim.adapter import (
    AdapterConfig, InitScheme, delta_w, full_weight, grad_a, init_adapter, init_bases, local_update,
)
from florg_sim.errors import ContractViolation, DivergenceError


def _state(rng, d_out=7, d_in=5, r=2, scheme=InitScheme.SEMI_ORTHOGONAL):
    config = AdapterConfig(d_out=d_out, d_in=d_in, r=r, alpha=8.0, init_scheme=scheme, seed=11)
    return init_adapter(config, rng.standard_normal((d_out, d_in)))


@pytest.mark.parametrize("scheme", list(InitScheme))
@pytest.mark.parametrize("d_out,d_in", [(7, 5), (4, 9), (6, 6)])
def test_bases_are_semi_orthogonal(rng, scheme, d_out, d_in):
    state = _state(rng, d_out, d_in, scheme=scheme)
    k = min(d_out, d_in)

    assert state.l_basis.shape == (d_out, k)
    assert state.r_basis.shape == (k, d_in)
    assert state.a.shape == (2, k)
    np.testing.assert_allclose(state.l_basis.T @ state.l_basis, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(state.r_basis @ state.r_basis.T, np.eye(k), atol=1e-10)


def test_init_is_deterministic_per_seed(rng):
    w0 = rng.standard_normal((6, 4))
    first = init_bases(InitScheme.KAIMING, w0, seed=5)
    second = init_bases(InitScheme.KAIMING, w0, seed=5)
    other = init_bases(InitScheme.KAIMING, w0, seed=6)
    np.testing.assert_array_equal(first[0], second[0])
    assert not np.allclose(first[0], other[0])


def test_svd_bases_follow_w0(rng):
    w0 = rng.standard_normal((6, 4))
    l_basis, r_basis = init_bases(InitScheme.SVD, w0, seed=0)
    # W0 lies entirely in span(L) x span(R) when k = d_in.
    np.testing.assert_allclose(l_basis @ (l_basis.T @ w0 @ r_basis.T) @ r_basis, w0, atol=1e-10)


def test_frozen_matrices_are_read_only(rng):
    state = _state(rng)
    for m in (state.w0, state.l_basis, state.r_basis):
        with pytest.raises(ValueError):
            m[0, 0] = 1.0


def test_rank_above_k_is_rejected():
    with pytest.raises(ValidationError):
        AdapterConfig(d_out=3, d_in=5, r=4, alpha=1.0)


def test_delta_w_formula(rng):
    state = _state(rng)
    expected = state.config.scale * state.l_basis @ state.a.T @ state.a @ state.r_basis
    np.testing.assert_allclose(delta_w(state), expected, atol=1e-12)
    np.testing.assert_allclose(full_weight(state), state.w0 + expected, atol=1e-12)


def test_delta_w_depends_only_on_gram(rng):
    state = _state(rng, r=3)
    rotation, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    rotated = state.with_a(rotation @ state.a)
    np.testing.assert_allclose(delta_w(rotated), delta_w(state), atol=1e-12)


def test_grad_a_matches_central_differences(rng):
    state = _state(rng, r=3)
    g = rng.standard_normal(state.w0.shape)

    def objective(a):
        return float(np.sum(g * delta_w(state.with_a(a))))

    h = 1e-6
    numeric = np.zeros_like(state.a)
    for i in range(state.a.shape[0]):
        for j in range(state.a.shape[1]):
            step = np.zeros_like(state.a)
            step[i, j] = h
            numeric[i, j] = (objective(state.a + step) - objective(state.a - step)) / (2 * h)
    np.testing.assert_allclose(grad_a(state, g), numeric, atol=1e-6)


def test_local_update_steps_against_gradient(rng):
    state = _state(rng)
    g = rng.standard_normal(state.w0.shape)
    a_next = local_update(state, g, eta=0.1)
    np.testing.assert_allclose(a_next, state.a - 0.1 * grad_a(state, g))
    np.testing.assert_array_equal(local_update(state, g, eta=0.0), state.a)


def test_local_update_contracts(rng):
    state = _state(rng)
    g = rng.standard_normal(state.w0.shape)
    with pytest.raises(ContractViolation):
        local_update(state, g, eta=-1.0)
    g[0, 0] = np.inf
    with pytest.raises(DivergenceError, match=r"round 4, client 2"):
        local_update(state, g, eta=0.1, round_idx=4, client_id=2)
    with pytest.raises(ContractViolation):
        grad_a(state, np.ones((2, 2)))


def test_with_a_checks_shape(rng):
    state = _state(rng)
    with pytest.raises(ContractViolation):
        state.with_a(np.ones((3, 3)))
