import math

import numpy as np
import pytest

from florg_sim.diagnostics import BoundRecord, estimate_smoothness, omega, theorem2_diagnostics
from florg_sim.federation import Experiment, RoundTrace
from florg_sim.tasks import Dataset


def _trace(round_idx, lambda_min=1.0, delta_proc=0.0, sigma=1.0, psi=2.0):
    return RoundTrace(
        round=round_idx, train_loss=1.0, psi=psi, a_norm=3.0, a_tilde_norm=3.0,
        lambda_min=lambda_min, delta_proc=delta_proc, sigma_min_cross=sigma,
    )


def test_omega_formula():
    assert omega(0.1, 2.0) == pytest.approx(0.8 - 0.005 - 0.05)
    assert omega(0.1, 0.0) < 0


def test_smoothness_is_largest_client_curvature():
    x1 = np.diag([3.0, 1.0])
    x2 = np.array([[1.0, 0.0]])
    data = [Dataset(x1, np.zeros(2, dtype=int)), Dataset(x2, np.zeros(1, dtype=int))]
    assert estimate_smoothness(data) == pytest.approx(4.5)


def test_terms_with_exact_alignment(small_config):
    cfg = small_config.model_copy(update={"eta": 0.1})
    records = theorem2_diagnostics([_trace(1), _trace(2)], cfg, smoothness=2.0, initial_loss=1.0)
    om = omega(0.1, 1.0)

    assert [rec.round for rec in records] == [1, 2]
    last = records[-1]
    assert last.omega_positive and last.drift_defined
    assert last.gap_term == pytest.approx(1.0 / (2 * om))
    expected_bias = 0.01 * 4.0 / (2 * om) + 3 * 2.0 * 0.01 * 2.0 * (0.01 * 2.0 + 2 * 9.0) / (2 * om)
    assert last.bias_term == pytest.approx(expected_bias)
    assert last.drift_term == 0.0


def test_drift_term_accumulates_and_becomes_undefined(small_config):
    cfg = small_config.model_copy(update={"eta": 0.1})
    history = [_trace(1, delta_proc=0.5, sigma=0.25), _trace(2, delta_proc=0.5, sigma=0.0)]
    first, second = theorem2_diagnostics(history, cfg, smoothness=1.0, initial_loss=1.0)

    n = cfg.num_clients
    expected = 2 * 0.1 * 2.0 * 9.0 * 0.5 / (n * 0.25) / omega(0.1, 1.0)
    assert first.drift_term == pytest.approx(expected)
    assert second.drift_term is None
    assert not second.drift_defined
    assert second.gap_term is not None


def test_vacuous_omega_leaves_terms_undefined(small_config):
    records = theorem2_diagnostics([_trace(1, lambda_min=1e-9)], small_config, 1.0, 1.0)
    rec = records[0]
    assert not rec.omega_positive
    assert rec.gap_term is None and rec.bias_term is None and rec.drift_term is None


def test_empty_history_is_rejected(small_config):
    with pytest.raises(ValueError):
        theorem2_diagnostics([], small_config, 1.0, 1.0)


def test_diagnostics_along_a_real_run(small_config):
    experiment = Experiment(small_config)
    experiment.run()
    records = theorem2_diagnostics(
        experiment.history, small_config, estimate_smoothness(experiment.client_data),
        experiment.initial_train_loss,
    )
    assert len(records) == small_config.rounds
    assert BoundRecord.columns()[0] == "round"
    assert len(records[0].as_row()) == len(BoundRecord.columns())
    for rec in records:
        assert rec.psi >= 0 and rec.smoothness > 0
        assert rec.drift_term is None or math.isclose(rec.drift_term, 0.0, abs_tol=1e-12)
