import numpy as np
import pytest

from florg_sim.baselines import SchemeId
from florg_sim.schemes import (
    FedExScheme, FedSaScheme, FlorgScheme, make_scheme, payload_params, smallest_positive_eigenvalue,
)

D_OUT, D_IN, RANK = 8, 6, 2

EXPECTED_UPLINK = {
    SchemeId.FLORG: RANK * 6,
    SchemeId.FEDIT: RANK * (D_OUT + D_IN),
    SchemeId.FEDERA: RANK * (D_OUT + D_IN),
    SchemeId.FFA_LORA: RANK * D_OUT,
    SchemeId.FEDSA_LORA: RANK * D_IN,
    SchemeId.FEDEX_LORA: RANK * (D_OUT + D_IN),
}


@pytest.fixture
def w0s(rng):
    return [rng.standard_normal((D_OUT, D_IN))]


def _train_clients(scheme, state, rng, client_ids):
    """Every client takes one SGD step on its own random full-weight gradient."""
    uploads = []
    for cid in client_ids:
        layers = scheme.client_start(state, cid)
        grads = [rng.standard_normal((D_OUT, D_IN)) for _ in layers]
        uploads.append(scheme.local_step(layers, grads, 0.05, 1, cid))
    return uploads


@pytest.mark.parametrize("scheme_id", list(SchemeId))
def test_payloads_match_communication_formulas(scheme_id, w0s):
    scheme = make_scheme(scheme_id, RANK, alpha=4.0, seed=0)
    state = scheme.init_global(w0s, num_clients=3)
    layer = state.layers[0]

    assert scheme.scheme_id is scheme_id
    assert scheme.uplink_params(D_OUT, D_IN) == EXPECTED_UPLINK[scheme_id]
    assert payload_params(scheme.upload(layer)) == EXPECTED_UPLINK[scheme_id]
    assert payload_params(scheme.download(layer)) == scheme.downlink_params(D_OUT, D_IN)


def test_florg_halves_fedit_uplink_on_square_layers():
    florg = make_scheme(SchemeId.FLORG, 4, alpha=16.0, seed=0)
    fedit = make_scheme(SchemeId.FEDIT, 4, alpha=16.0, seed=0)
    assert 2 * florg.uplink_params(32, 32) == fedit.uplink_params(32, 32)


def test_fedex_broadcasts_the_frozen_weight():
    scheme = FedExScheme(RANK, alpha=4.0, seed=0)
    assert scheme.downlink_params(D_OUT, D_IN) == RANK * (D_OUT + D_IN) + D_OUT * D_IN


@pytest.mark.parametrize("scheme_id", list(SchemeId))
def test_every_scheme_aggregates(scheme_id, w0s, rng):
    scheme = make_scheme(scheme_id, RANK, alpha=4.0, seed=0)
    state = scheme.init_global(w0s, num_clients=3)
    uploads = _train_clients(scheme, state, rng, [0, 1, 2])
    new_state, reports = scheme.aggregate(state, [0, 1, 2], uploads, [1 / 3] * 3)

    assert len(reports) == 1
    assert reports[0].agg_error >= 0.0
    for model in scheme.eval_models(new_state):
        weights = scheme.full_weights(model)
        assert weights[0].shape == (D_OUT, D_IN)
        assert np.all(np.isfinite(weights[0]))


def test_florg_aggregate_reports_server_measurements(w0s, rng):
    scheme = FlorgScheme(RANK, alpha=4.0, seed=0)
    state = scheme.init_global(w0s, num_clients=3)
    uploads = _train_clients(scheme, state, rng, [0, 1, 2])
    new_state, (report,) = scheme.aggregate(state, [0, 1, 2], uploads, [0.2, 0.3, 0.5])

    assert report.agg_error <= 1e-12
    assert report.delta_proc == 0.0
    assert report.truncation_loss > 0.0
    assert report.lambda_min > 0.0
    assert report.server_flops > 0
    assert new_state.layers[0].a.shape == (RANK, 6)
    np.testing.assert_array_equal(new_state.layers[0].l_basis, state.layers[0].l_basis)


def test_florg_align_off_reports_drift(w0s, rng):
    scheme = FlorgScheme(RANK, alpha=4.0, seed=0, align=False)
    state = scheme.init_global(w0s, num_clients=3)
    uploads = _train_clients(scheme, state, rng, [0, 1, 2])
    _, (report,) = scheme.aggregate(state, [0, 1, 2], uploads, [1 / 3] * 3)
    assert report.delta_proc > 0.0


def test_fedsa_keeps_personal_b(w0s, rng):
    scheme = FedSaScheme(RANK, alpha=4.0, seed=0)
    state = scheme.init_global(w0s, num_clients=4)
    uploads = _train_clients(scheme, state, rng, [1, 3])
    new_state, _ = scheme.aggregate(state, [1, 3], uploads, [0.5, 0.5])

    np.testing.assert_array_equal(new_state.personal[1][0], uploads[0][0].b)
    np.testing.assert_array_equal(new_state.personal[3][0], uploads[1][0].b)
    np.testing.assert_array_equal(new_state.personal[0][0], state.personal[0][0])
    assert len(scheme.eval_models(new_state)) == 4
    for cid in range(4):
        np.testing.assert_array_equal(scheme.client_start(new_state, cid)[0].a, new_state.layers[0].a)


def test_state_matrices_names(w0s):
    florg = FlorgScheme(RANK, alpha=4.0, seed=0)
    assert set(florg.state_matrices(florg.init_global(w0s, 2))) == {
        "layer0.w0", "layer0.l_basis", "layer0.r_basis", "layer0.a",
    }
    fedsa = FedSaScheme(RANK, alpha=4.0, seed=0)
    names = set(fedsa.state_matrices(fedsa.init_global(w0s, 2)))
    assert {"layer0.b", "layer0.a", "client0.layer0.b", "client1.layer0.b"} <= names


def test_smallest_positive_eigenvalue():
    assert smallest_positive_eigenvalue(np.array([[2.0, 0.0], [0.0, 0.0]])) == pytest.approx(4.0)
    assert smallest_positive_eigenvalue(np.array([[3.0, 0.0], [0.0, 1.0]])) == pytest.approx(1.0)
    assert smallest_positive_eigenvalue(np.zeros((2, 3))) == 0.0
