"""Expert redundancy diagnostics: parameter variation, MMD and parameter accounting."""

import itertools
import logging
import math
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from mpoe.errors import ShapeError
from mpoe.layer import (
    SLOTS,
    Bank,
    MpoeExpertBank,
    bank_param_counts,
    efficiency_ratio,
    expert_outputs,
)
from mpoe.models import (
    KernelKind,
    KernelSpec,
    MmdReport,
    ModelScaleAccounting,
    RedundancyReport,
    VariationStats,
)
from mpoe.mpo import count_plan_params, plan_factorization

logger = logging.getLogger(__name__)

SMALL_DIFF = 1e-4
MID_DIFF = 1.5e-2

# GPT-2 small: embeddings, attention, layer norms and FFN, 12 layers
GPT2_SMALL_PARAMS = 124_439_808


def _flat_expert(bank: Bank, i: int) -> np.ndarray:
    return np.concatenate([bank.expert_weight(s, i).ravel() for s in SLOTS])


def expert_variation(bank: Bank, reference: int = 0) -> list[VariationStats]:
    """
    Compare every expert's weights against the reference expert.

    Differences are signed (other - reference) over both weight slots;
    ``std_dev`` is the population standard deviation.

    Raises:
        ValueError: If the bank has fewer than two experts.
        IndexError: If ``reference`` is out of range.
    """
    n = bank.n_experts
    if n < 2:
        raise ValueError(f"variation needs at least two experts, got {n}")
    if not 0 <= reference < n:
        raise IndexError(f"reference expert {reference} out of range [0, {n})")

    ref = _flat_expert(bank, reference)
    stats = []
    for j in range(n):
        if j == reference:
            continue
        diff = _flat_expert(bank, j) - ref
        magnitude = np.abs(diff)
        stats.append(
            VariationStats(
                expert_pair=(reference, j),
                mean=float(diff.mean()),
                std_dev=float(diff.std()),
                frac_lt_1e4=float(np.count_nonzero(magnitude < SMALL_DIFF) / diff.size),
                frac_mid=float(
                    np.count_nonzero((magnitude >= SMALL_DIFF) & (magnitude < MID_DIFF)) / diff.size
                ),
            )
        )
    return stats


def mmd_threshold(m: int, kernel_bound: float, alpha: float) -> float:
    """
    Acceptance threshold of the level-alpha MMD two-sample test.

    2 sqrt(K / m) (1 + sqrt(ln(1 / alpha))), with K the supremum of the kernel.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not kernel_bound > 0:
        raise ValueError(f"kernel bound must be > 0, got {kernel_bound}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return 2.0 * math.sqrt(kernel_bound / m) * (1.0 + math.sqrt(math.log(1.0 / alpha)))


def _check_samples(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise ValueError("each sample set needs at least two points")
    return x, y


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples (1.0 if all coincide)."""
    dists = pdist(np.vstack([x, y]))
    dists = dists[dists > 0]
    return float(np.median(dists)) if dists.size else 1.0


def _kernel_matrix(a: np.ndarray, b: np.ndarray, kind: KernelKind, bandwidth: float) -> np.ndarray:
    if kind is KernelKind.LINEAR:
        return a @ b.T
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth**2))


def _mean(k: np.ndarray) -> float:
    return math.fsum(k.ravel()) / k.size


def resolve_kernel(x: np.ndarray, y: np.ndarray, kernel: Optional[KernelSpec] = None) -> KernelSpec:
    """Fill in the median-heuristic bandwidth when an RBF kernel has none."""
    kernel = kernel or KernelSpec()
    if kernel.kind is KernelKind.RBF and kernel.bandwidth is None:
        return KernelSpec(kind=kernel.kind, bandwidth=median_bandwidth(x, y))
    return kernel


def empirical_mmd(x: np.ndarray, y: np.ndarray, kernel: Optional[KernelSpec] = None) -> float:
    """
    Biased MMD estimate between two sample sets.

    sqrt(mean k(x, x') + mean k(y, y') - 2 mean k(x, y)), clamped at zero.
    The default kernel is a Gaussian RBF with median-heuristic bandwidth.

    Args:
        x: m_x x d samples.
        y: m_y x d samples.
        kernel: Kernel descriptor.

    Raises:
        ShapeError: If the feature dimensions differ.
    """
    x, y = _check_samples(x, y)
    kernel = resolve_kernel(x, y, kernel)
    kxx = _mean(_kernel_matrix(x, x, kernel.kind, kernel.bandwidth or 1.0))
    kyy = _mean(_kernel_matrix(y, y, kernel.kind, kernel.bandwidth or 1.0))
    kxy = _mean(_kernel_matrix(x, y, kernel.kind, kernel.bandwidth or 1.0))
    return math.sqrt(max(0.0, kxx + kyy - 2.0 * kxy))


def mmd_test(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float = 0.05,
    kernel: Optional[KernelSpec] = None,
    expert_pair: Optional[tuple[int, int]] = None,
) -> MmdReport:
    """
    Compare the empirical MMD with the level-alpha threshold.

    K = 1 for the RBF kernel; for the linear kernel K is the largest squared
    sample norm.
    """
    x, y = _check_samples(x, y)
    kernel = resolve_kernel(x, y, kernel)
    if kernel.kind is KernelKind.RBF:
        bound = 1.0
    else:
        bound = float(max(np.max(np.sum(x * x, axis=1)), np.max(np.sum(y * y, axis=1)), 1e-300))
    m = min(len(x), len(y))
    threshold = mmd_threshold(m, bound, alpha)
    empirical = empirical_mmd(x, y, kernel)
    return MmdReport(
        expert_pair=expert_pair,
        threshold=threshold,
        empirical=empirical,
        same_distribution=empirical < threshold,
        m=m,
        alpha=alpha,
        kernel_bound=bound,
        kernel=kernel,
    )


def threshold_note(alpha: float = 0.05) -> str:
    value = mmd_threshold(2500, 1.0, alpha)
    return (
        f"threshold = 2*sqrt(K/m)*(1+sqrt(ln(1/alpha))); at m=2500, K=1, alpha={alpha} "
        f"this evaluates to {value:.4f}, not the 0.178 sometimes quoted for these inputs"
    )


def redundancy_report(
    bank: Bank,
    probes: np.ndarray,
    alpha: float = 0.05,
    reference: int = 0,
    initial_bank: Optional[MpoeExpertBank] = None,
    kernel: Optional[KernelSpec] = None,
) -> RedundancyReport:
    """
    Variation statistics, pairwise MMD on expert outputs and parameter counts.

    Args:
        bank: Bank to analyze.
        probes: batch x d_model inputs fed to every expert (ungated).
        alpha: Test level.
        reference: Expert the variation statistics are taken against.
        initial_bank: When given, the report records whether each central
            tensor still equals its initial value bitwise.
        kernel: MMD kernel; RBF with median bandwidth when omitted.
    """
    outputs = expert_outputs(bank, probes)
    mmd = [
        mmd_test(outputs[i], outputs[j], alpha=alpha, kernel=kernel, expert_pair=(i, j))
        for i, j in itertools.combinations(range(bank.n_experts), 2)
    ]
    params = bank_param_counts(bank)
    ratio = efficiency_ratio(bank.n_experts, params.gamma) if params.gamma > 0 else 1.0

    central_unchanged = None
    if initial_bank is not None and isinstance(bank, MpoeExpertBank):
        central_unchanged = {
            s.value: bool(np.array_equal(bank.centrals[s], initial_bank.centrals[s])) for s in SLOTS
        }

    same = sum(r.same_distribution for r in mmd)
    logger.info("redundancy: %d/%d expert pairs below the MMD threshold", same, len(mmd))
    return RedundancyReport(
        n_experts=bank.n_experts,
        reference=reference,
        variation=expert_variation(bank, reference) if bank.n_experts >= 2 else [],
        mmd=mmd,
        params=params,
        gamma=params.gamma,
        efficiency_ratio=ratio,
        mmd_threshold_note=threshold_note(alpha),
        central_unchanged=central_unchanged,
    )


def model_scale_accounting(
    n_layers: int = 12,
    d_model: int = 768,
    d_ff: int = 3072,
    n_experts: int = 8,
    base_total: int = GPT2_SMALL_PARAMS,
    m: int = 5,
) -> ModelScaleAccounting:
    """
    Parameter totals of a transformer with mixture-of-experts FFN layers.

    The MoE model keeps the base FFN and adds ``n_experts`` dense experts per
    layer. The MPOE model replaces each FFN with a bank of ``n_experts``
    experts sharing the central tensors of both weight matrices; its per-layer
    count includes expert biases and the gate.
    """
    ffn = 2 * d_model * d_ff + d_ff + d_model
    counts = [
        count_plan_params(plan_factorization(d_model, d_ff, m)),
        count_plan_params(plan_factorization(d_ff, d_model, m)),
    ]
    central = sum(c.central for c in counts)
    auxiliary = sum(c.auxiliary for c in counts)
    bank = central + n_experts * auxiliary + n_experts * (d_ff + d_model) + d_model * n_experts
    return ModelScaleAccounting(
        n_layers=n_layers,
        d_model=d_model,
        d_ff=d_ff,
        n_experts=n_experts,
        base_total=base_total,
        ffn_per_layer=ffn,
        moe_total=base_total + n_layers * n_experts * ffn,
        mpoe_total=base_total - n_layers * ffn + n_layers * bank,
        mpoe_bank_per_layer=bank,
        gamma=central / auxiliary,
    )
