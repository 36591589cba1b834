"""Tests for the synthetic regression task."""

import numpy as np
import pytest

from mpoe.layer import forward
from mpoe.models import TaskConfig, WeightSlot
from mpoe.task import SyntheticTask, mse_loss, random_teacher


class TestMseLoss:
    """Tests for mse_loss."""

    def test_value(self):
        """Mean of squared differences."""
        loss, _ = mse_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
        assert loss == pytest.approx(2.5)

    def test_gradient(self, rng):
        """The gradient matches central differences."""
        pred, target = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        _, grad = mse_loss(pred, target)
        h = 1e-6
        for idx in [(0, 0), (1, 2), (2, 3)]:
            up, down = pred.copy(), pred.copy()
            up[idx] += h
            down[idx] -= h
            numeric = (mse_loss(up, target)[0] - mse_loss(down, target)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(numeric, rel=1e-6, abs=1e-9)


class TestSyntheticTask:
    """Tests for SyntheticTask."""

    def test_shapes(self):
        """Inputs and targets are n_samples x d_model."""
        task = SyntheticTask.generate(TaskConfig(d_model=4, d_ff=6, n_samples=10))
        assert task.inputs.shape == (10, 4)
        assert task.targets.shape == (10, 4)
        assert task.teacher.n_experts == 4

    def test_deterministic(self):
        """The same config yields identical arrays."""
        config = TaskConfig(d_model=4, d_ff=6, n_samples=20, seed=5)
        a, b = SyntheticTask.generate(config), SyntheticTask.generate(config)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.targets, b.targets)

    def test_seed_changes_data(self):
        """Different seeds give different data."""
        a = SyntheticTask.generate(TaskConfig(d_model=4, d_ff=6, n_samples=20, seed=0))
        b = SyntheticTask.generate(TaskConfig(d_model=4, d_ff=6, n_samples=20, seed=1))
        assert not np.array_equal(a.inputs, b.inputs)

    def test_noiseless_targets(self):
        """With noise_std=0 targets equal the teacher's outputs."""
        task = SyntheticTask.generate(TaskConfig(d_model=4, d_ff=6, n_samples=12, noise_std=0.0))
        clean, _ = forward(task.teacher, task.inputs)
        np.testing.assert_array_equal(task.targets, clean)

    def test_single_teacher_expert(self, rng):
        """One teacher expert routes with k=1."""
        teacher = random_teacher(TaskConfig(teacher_experts=1, d_model=3, d_ff=5), rng)
        assert teacher.gate.k == 1
        assert teacher.weights[WeightSlot.W1].shape == (1, 3, 5)

    def test_batches_cover_epoch(self, rng):
        """Each epoch visits every row once; the last batch may be short."""
        task = SyntheticTask.generate(TaskConfig(d_model=2, d_ff=3, n_samples=10))
        batches = list(task.batches(4, rng))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
