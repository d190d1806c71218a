"""
Numerical evaluation of the FLoRG convergence bound along a finished run.

The bound's constants (gradient bound psi, parameter bounds C_A and C~_A,
smoothness L) are unknown in general; every one of them is replaced by the
running empirical maximum observed so far, so the values reported here are
estimates, not certified bounds. The optimal loss is lower-bounded by 0.
"""

import math
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence

import numpy as np

from .federation import ExperimentConfig, RoundTrace
from .server_core import SIGMA_DEFINED_THRESHOLD
from .tasks import Dataset
from . import mylogger

logger = mylogger.get_logger(__name__)


@dataclass(frozen=True)
class BoundRecord:
    """One row of theorem2.csv. None means undefined (vacuous Omega or ill-conditioned alignment)."""

    round: int
    lambda_min: Optional[float]
    omega: Optional[float]
    psi: float
    c_a: float
    c_a_tilde: Optional[float]
    smoothness: float
    delta_proc: Optional[float]
    sigma_min_cross: Optional[float]
    gap_term: Optional[float]
    bias_term: Optional[float]
    drift_term: Optional[float]
    omega_positive: bool
    drift_defined: bool

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> tuple:
        return tuple(getattr(self, name) for name in self.columns())


def estimate_smoothness(client_data: Sequence[Dataset]) -> float:
    """max_n lambda_max(X_n^T X_n / m_n): exact for squared loss, an upper bound for softmax."""
    best = 0.0
    for data in client_data:
        x = data.features
        if x.shape[0] == 0:
            continue
        best = max(best, float(np.linalg.eigvalsh(x.T @ x / x.shape[0])[-1]))
    return best


def omega(eta: float, lambda_min: float) -> float:
    return 4.0 * eta * lambda_min - eta * eta / 2.0 - eta / 2.0


def _defined(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else float(value)


def theorem2_diagnostics(
    history: Sequence[RoundTrace],
    cfg: ExperimentConfig,
    smoothness: float,
    initial_loss: float,
) -> List[BoundRecord]:
    """
    Evaluate the gap, bias and drift terms of the bound after every round t, as if
    the run had stopped at T = t. Rounds whose alignment drift is exactly zero add
    nothing to the drift sum; a positive drift with sigma_min_cross <= 1e-8 makes
    the drift term undefined from that round on.
    """
    if not history:
        raise ValueError("theorem2_diagnostics needs at least one completed round")
    eta = cfg.eta
    n = cfg.num_clients
    records: List[BoundRecord] = []

    lambda_run = math.inf
    psi = 0.0
    c_a = 0.0
    c_a_tilde = 0.0
    drift_sum = 0.0
    drift_defined = True
    warned = False

    for t, trace in enumerate(history, start=1):
        if not math.isnan(trace.lambda_min):
            lambda_run = min(lambda_run, trace.lambda_min)
        psi = max(psi, trace.psi)
        c_a = max(c_a, trace.a_norm)
        if not math.isnan(trace.a_tilde_norm):
            c_a_tilde = max(c_a_tilde, trace.a_tilde_norm)

        if trace.delta_proc > 0:
            if trace.sigma_min_cross > SIGMA_DEFINED_THRESHOLD:
                drift_sum += 2.0 * eta * psi * c_a_tilde ** 2 * trace.delta_proc / (n * trace.sigma_min_cross)
            else:
                drift_defined = False

        om = omega(eta, lambda_run) if math.isfinite(lambda_run) else None
        positive = om is not None and om > 0
        gap = bias = drift = None
        if positive:
            gap = initial_loss / (t * om)
            bias = eta ** 2 * psi ** 2 / (2.0 * om) \
                + 3.0 * smoothness * eta ** 2 * psi * (eta ** 2 * psi + 2.0 * c_a ** 2) / (2.0 * om)
            drift = drift_sum / (t * om) if drift_defined else None
        elif not warned:
            logger.warning(f"Omega is not positive at round {trace.round} ({om}); the bound is vacuous")
            warned = True

        records.append(BoundRecord(
            round=trace.round,
            lambda_min=_defined(lambda_run) if math.isfinite(lambda_run) else None,
            omega=om,
            psi=psi,
            c_a=c_a,
            c_a_tilde=c_a_tilde if c_a_tilde > 0 else None,
            smoothness=smoothness,
            delta_proc=_defined(trace.delta_proc),
            sigma_min_cross=_defined(trace.sigma_min_cross),
            gap_term=gap,
            bias_term=bias,
            drift_term=drift,
            omega_positive=positive,
            drift_defined=drift_defined,
        ))
    return records
