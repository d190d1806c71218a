import dataclasses

import numpy as np
import pytest

from florg_sim import server_core, verify
from florg_sim.diagnostics import theorem2_diagnostics
from florg_sim.server_core import alignment_residual, identity_alignment

TINY = dataclasses.replace(
    verify.QUICK,
    procrustes_instances=40, procrustes_candidates=50, grad_checks=5, pipeline_runs=30,
    linalg_trials=15, partition_trials=5, bias_rounds=10, orthonormal_seeds=40, drift_instances=40,
    convergence_seeds=1, convergence_min_pass=1,
)


@pytest.mark.parametrize("check", [
    verify.check_orthonormal_columns,
    verify.check_matmul_determinism,
    verify.check_procrustes_optimality,
    verify.check_alignment_drift_bound,
    verify.check_sym_eig,
    verify.check_thin_svd,
    verify.check_svd_matches_eig,
    verify.check_truncation_optimality,
    verify.check_gram_pipeline,
    verify.check_delta_w_homogeneity,
    verify.check_frozen_state,
    verify.check_gradients,
    verify.check_baseline_aggregation,
    verify.check_factor_locality,
    verify.check_partition,
    verify.check_communication,
    verify.check_aggregation_bias_free,
    verify.check_alignment_ablation,
    verify.check_bound_diagnostics,
    verify.check_determinism,
])
def test_properties_hold(check):
    result = check(np.random.default_rng(1234), TINY)
    assert result.passed, result.detail


def test_planted_procrustes_bug_is_caught():
    def broken(a_prev, a_tilde):
        return identity_alignment(a_prev.shape[0], a_tilde.shape[0])

    result = verify.check_procrustes_optimality(np.random.default_rng(7), TINY, align_fn=broken)
    assert not result.passed



def test_identity_alignment_in_place_of_procrustes_fails_ablation(monkeypatch):
    exact = server_core.procrustes_align

    def skewed(a_prev, factor):
        optimal = exact(a_prev, factor)
        s = identity_alignment(a_prev.shape[0], factor.rank)
        residual = alignment_residual(a_prev, factor.a_tilde, s)
        return dataclasses.replace(
            optimal, s_applied=s, a_next=s @ factor.a_tilde, residual=residual,
            delta_proc=max(residual - optimal.optimal_residual, 0.0),
        )

    monkeypatch.setattr(server_core, "procrustes_align", skewed)
    result = verify.check_alignment_ablation(np.random.default_rng(11), TINY)
    assert not result.passed


def test_omega_without_step_size_penalty_fails_bound_diagnostics():
    def sloppy(history, cfg, smoothness, initial_loss):
        records = theorem2_diagnostics(history, cfg, smoothness, initial_loss)
        return [
            rec if rec.lambda_min is None
            else dataclasses.replace(rec, omega=4.0 * cfg.eta * rec.lambda_min)
            for rec in records
        ]

    result = verify.check_bound_diagnostics(np.random.default_rng(13), TINY, diagnostics_fn=sloppy)
    assert not result.passed
    assert "Omega consistent with lambda_min: False" in result.detail


def test_realizable_task_reaches_target():
    result = verify.check_convergence(np.random.default_rng(3), TINY)
    assert result.passed, result.detail


def test_crashing_property_fails_the_suite(monkeypatch):
    def check_explodes(rng, profile):
        raise RuntimeError("boom")

    monkeypatch.setattr(verify, "PROPERTIES", [check_explodes])
    entropy, results = verify.run_suite(quick=True, entropy=42)
    assert entropy == 42
    assert [r.name for r in results] == ["explodes"]
    assert not results[0].passed
    assert "boom" in results[0].detail


def test_suite_reports_entropy_for_replay(monkeypatch):
    monkeypatch.setattr(verify, "PROPERTIES", [verify.check_communication])
    first = verify.run_suite(quick=True, entropy=5)
    second = verify.run_suite(quick=True, entropy=5)
    assert first[1][0].detail == second[1][0].detail
