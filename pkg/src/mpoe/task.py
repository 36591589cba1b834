"""Teacher-student regression task used to train expert banks."""

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from mpoe.gating import init_gate
from mpoe.layer import DenseMoeBank, forward
from mpoe.models import GateKind, TaskConfig, WeightSlot

TEACHER_BIAS_SCALE = 0.1


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def random_teacher(config: TaskConfig, rng: np.random.Generator) -> DenseMoeBank:
    """Dense top-2 MoE with N(0, 1/fan_in) weights and small biases."""
    n, d_model, d_ff = config.teacher_experts, config.d_model, config.d_ff
    weights = {
        WeightSlot.W1: rng.normal(0.0, d_model**-0.5, size=(n, d_model, d_ff)),
        WeightSlot.W2: rng.normal(0.0, d_ff**-0.5, size=(n, d_ff, d_model)),
    }
    biases = {
        WeightSlot.W1: rng.normal(0.0, TEACHER_BIAS_SCALE, size=(n, d_ff)),
        WeightSlot.W2: rng.normal(0.0, TEACHER_BIAS_SCALE, size=(n, d_model)),
    }
    gate = init_gate(d_model, n, rng, k=min(2, n), kind=GateKind.TOPK)
    return DenseMoeBank(weights=weights, biases=biases, gate=gate)


@dataclass(frozen=True)
class SyntheticTask:
    """Inputs ~ N(0, I); targets = teacher(inputs) + N(0, noise_std^2)."""

    config: TaskConfig
    teacher: DenseMoeBank
    inputs: np.ndarray
    targets: np.ndarray

    @classmethod
    def generate(cls, config: TaskConfig) -> "SyntheticTask":
        """Build the task; the same config always yields the same arrays."""
        rng = np.random.default_rng(config.seed)
        teacher = random_teacher(config, rng)
        inputs = rng.standard_normal((config.n_samples, config.d_model))
        clean, _ = forward(teacher, inputs)
        targets = clean + config.noise_std * rng.standard_normal(clean.shape)
        return cls(config=config, teacher=teacher, inputs=inputs, targets=targets)

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        """Row indices of one shuffled epoch, ``batch_size`` at a time."""
        order = rng.permutation(len(self.inputs))
        for start in range(0, len(order), batch_size):
            yield order[start : start + batch_size]
