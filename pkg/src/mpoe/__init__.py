"""MPOE - Mixture-of-experts layers whose experts share MPO central tensors."""

from mpoe.layer import DenseMoeBank, MpoeExpertBank, backward, forward, init_from_dense
from mpoe.models import ExperimentConfig, FactorizationPlan, GateKind, MaskedUpdateConfig
from mpoe.mpo import MpoFactors, decompose, plan_factorization, reconstruct
from mpoe.optimizer import masked_step

__version__ = "0.1.0"
__all__ = [
    "DenseMoeBank",
    "ExperimentConfig",
    "FactorizationPlan",
    "GateKind",
    "MaskedUpdateConfig",
    "MpoFactors",
    "MpoeExpertBank",
    "backward",
    "decompose",
    "forward",
    "init_from_dense",
    "masked_step",
    "plan_factorization",
    "reconstruct",
]
