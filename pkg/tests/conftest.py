"""Shared test fixtures."""

import numpy as np
import pytest

from mpoe.gating import init_gate
from mpoe.layer import MpoeExpertBank, init_from_dense
from mpoe.models import (
    ExperimentConfig,
    FactorizationPlan,
    GateKind,
    OptimizerSettings,
    TaskConfig,
)
from mpoe.mpo import plan_factorization

# 768 x 3072 plan of a T5-base feed-forward layer
T5_ROWS = [3, 4, 4, 4, 4]
T5_COLS = [4, 4, 8, 6, 4]


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def t5_plan() -> FactorizationPlan:
    """768 x 3072 factorization plan."""
    return FactorizationPlan(row_factors=T5_ROWS, col_factors=T5_COLS)


def make_bank(
    rng: np.random.Generator,
    d_model: int = 6,
    d_ff: int = 8,
    n: int = 2,
    m: int = 3,
    k: int = 1,
    kind: GateKind = GateKind.TOPK,
    noise: bool = False,
) -> MpoeExpertBank:
    """Small MPOE bank built from a random dense FFN."""
    w1 = rng.normal(0.0, d_model**-0.5, size=(d_model, d_ff))
    w2 = rng.normal(0.0, d_ff**-0.5, size=(d_ff, d_model))
    gate = init_gate(d_model, n, rng, k=k, kind=kind, noise=noise)
    return init_from_dense(
        w1, w2, plan_factorization(d_model, d_ff, m), plan_factorization(d_ff, d_model, m), n, gate
    )


def perturb(bank: MpoeExpertBank, rng: np.random.Generator, scale: float = 0.1) -> MpoeExpertBank:
    """Perturb every auxiliary tensor and bias so the experts differ."""
    params = {
        name: p + scale * rng.standard_normal(p.shape)
        for name, p in bank.to_params().items()
        if ".aux." in name or name.endswith(".bias")
    }
    return bank.with_params(params)


@pytest.fixture
def small_bank(rng: np.random.Generator) -> MpoeExpertBank:
    """d_model=6, d_ff=8, n=2, m=3 bank with top-1 routing."""
    return make_bank(rng)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Experiment that trains in well under a second."""
    return ExperimentConfig(
        task=TaskConfig(teacher_experts=2, d_model=4, d_ff=8, n_samples=32, noise_std=0.01, seed=0),
        model={"n_experts": 2, "m": 3, "gate": {"kind": "topk", "k": 1}, "seed": 1},
        optimizer=OptimizerSettings(lr=0.05, epochs=3, batch_size=8, seed=2),
    )
