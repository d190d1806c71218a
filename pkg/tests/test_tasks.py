import numpy as np
import pytest
from pydantic import ValidationError

from florg_sim.errors import ContractViolation
from florg_sim.linalg import orthonormal_columns
from florg_sim.tasks import TaskKind, TaskSpec, dirichlet_partition, generate_task


def _numeric_grad(task, weights, data, h=1e-6):
    w = weights[0]
    numeric = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            plus, minus = w.copy(), w.copy()
            plus[i, j] += h
            minus[i, j] -= h
            numeric[i, j] = (task.loss([plus], data) - task.loss([minus], data)) / (2 * h)
    return numeric


def test_generate_task_is_deterministic(small_task):
    first = generate_task(small_task)
    second = generate_task(small_task)
    np.testing.assert_array_equal(first.w0[0], second.w0[0])
    np.testing.assert_array_equal(first.train.features, second.train.features)
    np.testing.assert_array_equal(first.train.targets[0], second.train.targets[0])
    other = generate_task(small_task.model_copy(update={"seed": small_task.seed + 1}))
    assert not np.allclose(first.w0[0], other.w0[0])


def test_planted_target_lives_in_the_given_subspace(small_task):
    l0 = orthonormal_columns(8, 6, seed=1)
    r0 = orthonormal_columns(6, 6, seed=2).T
    task = generate_task(small_task, lambda layer, w0: (l0, r0), planted_scale=2.0)

    perturbation = task.w_target[0] - task.w0[0]
    assert np.linalg.matrix_rank(perturbation, tol=1e-9) == small_task.true_rank
    np.testing.assert_allclose(l0 @ (l0.T @ perturbation), perturbation, atol=1e-12)
    assert task.loss(task.w_target, task.train) == pytest.approx(0.0, abs=1e-20)


def test_labels_are_balanced(small_task):
    task = generate_task(small_task)
    counts = np.bincount(task.train.labels, minlength=small_task.num_classes)
    assert counts.max() - counts.min() <= 1


def test_regression_gradient_matches_finite_differences(small_task):
    task = generate_task(small_task)
    rng = np.random.default_rng(0)
    weights = [task.w0[0] + 0.1 * rng.standard_normal(task.w0[0].shape)]
    data = task.train.take(np.arange(16))
    _, grads = task.loss_and_grads(weights, data)
    np.testing.assert_allclose(grads[0], _numeric_grad(task, weights, data), atol=1e-6)
    assert np.isnan(task.accuracy(weights, data))


def test_softmax_gradient_and_accuracy():
    spec = TaskSpec(kind=TaskKind.SOFTMAX_CLASSIFY, d_out=3, d_in=5, num_classes=3,
                    num_samples=60, num_eval_samples=30, cluster_separation=3.0, seed=4)
    task = generate_task(spec)
    assert task.w_target is None
    assert task.train.targets is None

    data = task.train.take(np.arange(12))
    loss, grads = task.loss_and_grads(list(task.w0), data)
    assert loss > 0
    np.testing.assert_allclose(grads[0], _numeric_grad(task, list(task.w0), data), atol=1e-6)
    accuracy = task.accuracy(list(task.w0), task.eval)
    assert 0.0 <= accuracy <= 1.0


def test_multi_layer_loss_sums_layers():
    spec = TaskSpec(d_out=4, d_in=4, num_samples=20, num_eval_samples=8, num_layers=2, seed=2)
    task = generate_task(spec)
    total = task.loss(list(task.w0), task.train)
    per_layer = [
        0.5 * np.sum((task.train.features @ w.T - y) ** 2) / task.train.size
        for w, y in zip(task.w0, task.train.targets)
    ]
    assert total == pytest.approx(sum(per_layer))


@pytest.mark.parametrize("kwargs", [
    {"true_rank": 7, "d_out": 6, "d_in": 8},
    {"kind": TaskKind.SOFTMAX_CLASSIFY, "d_out": 5, "num_classes": 4},
    {"kind": TaskKind.SOFTMAX_CLASSIFY, "d_out": 4, "num_classes": 4, "num_layers": 2},
    {"num_samples": 3, "num_classes": 4},
])
def test_task_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        TaskSpec(**kwargs)


def test_partition_covers_every_sample_once():
    labels = np.repeat(np.arange(4), 25)
    shards = dirichlet_partition(labels, n_clients=6, rho=0.5, seed=9)

    assert [s.client_id for s in shards] == list(range(6))
    assert all(s.sample_count > 0 for s in shards)
    merged = np.sort(np.concatenate([s.indices for s in shards]))
    np.testing.assert_array_equal(merged, np.arange(100))
    again = dirichlet_partition(labels, n_clients=6, rho=0.5, seed=9)
    for a, b in zip(shards, again):
        np.testing.assert_array_equal(a.indices, b.indices)


def test_partition_falls_back_when_draws_leave_clients_empty():
    labels = np.repeat(np.arange(2), 4)
    shards = dirichlet_partition(labels, n_clients=8, rho=0.01, seed=0)
    assert all(s.sample_count == 1 for s in shards)


@pytest.mark.parametrize("n_clients,rho", [(0, 0.5), (11, 0.5), (2, 0.0), (2, -1.0)])
def test_partition_contracts(n_clients, rho):
    with pytest.raises(ContractViolation):
        dirichlet_partition(np.arange(10) % 2, n_clients, rho, seed=0)
