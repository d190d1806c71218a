from pathlib import Path

import numpy as np
import pytest

from florg_sim.federation import ExperimentConfig
from florg_sim.tasks import TaskSpec

PROJECT_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def project_root() -> Path:
    return PROJECT_ROOT


@pytest.fixture
def small_task() -> TaskSpec:
    return TaskSpec(d_out=8, d_in=6, num_samples=96, num_eval_samples=32, true_rank=2, seed=3)


@pytest.fixture
def small_config(small_task: TaskSpec) -> ExperimentConfig:
    return ExperimentConfig(
        task=small_task, num_clients=4, rounds=3, eta=1e-3, rank=2, alpha=4.0,
        batch_size=8, seed=3, log_every=1,
    )
