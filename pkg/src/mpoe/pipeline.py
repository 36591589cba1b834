"""End-to-end flows behind the CLI: decomposition files, bound checks, training and sweeps."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from mpoe.analysis import redundancy_report
from mpoe.errors import TensorFileError
from mpoe.gating import init_gate
from mpoe.layer import (
    Bank,
    DenseMoeBank,
    MpoeExpertBank,
    backward,
    bank_param_counts,
    forward,
    init_from_dense,
)
from mpoe.models import (
    BoundTrial,
    DecompositionManifest,
    DType,
    ExperimentConfig,
    FactorizationPlan,
    MaskedUpdateConfig,
    NormalizeMode,
    RedundancyReport,
    SlotPlans,
    SweepRow,
    TrainingSummary,
)
from mpoe.mpo import (
    MpoFactors,
    bond_dimensions,
    count_params,
    decompose,
    normalize,
    plan_factorization,
    reconstruct,
    truncation_bound,
)
from mpoe.optimizer import (
    TrainState,
    central_frozen,
    draw_central_mask,
    init_train_state,
    masked_step,
    warmup_lr,
)
from mpoe.serialization import atomic_write_text, save_loss_curve, save_report
from mpoe.task import SyntheticTask, mse_loss
from mpoe.tensor_core import frobenius_norm
from mpoe.tensor_io import MANIFEST_NAME, TENSOR_SUFFIX, read_tensor, save_checkpoint, write_tensor

logger = logging.getLogger(__name__)

BOUND_RTOL = 1e-8
BOUND_ATOL = 1e-12

ProgressCallback = Callable[[int, int], None]


# Decomposition files


def decompose_to_dir(
    w: np.ndarray,
    plan: FactorizationPlan,
    out_dir: Union[str, Path],
    mode: NormalizeMode = NormalizeMode.NONE,
    dtype: DType = DType.F64,
) -> DecompositionManifest:
    """
    Decompose ``w`` and write ``local_<k>.mpot`` files plus ``manifest.json``.

    The manifest also records the realized reconstruction error of the
    written factors.
    """
    factors = normalize(decompose(w, plan), mode)
    out_dir = Path(out_dir)
    files = []
    for k, t in enumerate(factors.locals):
        name = f"local_{k}{TENSOR_SUFFIX}"
        write_tensor(out_dir / name, t, dtype)
        files.append(name)

    counts = count_params(factors)
    norm = frobenius_norm(w)
    diff = w - reconstruct(factors)
    manifest = DecompositionManifest(
        plan=plan,
        normalize=mode,
        shapes=[list(t.shape) for t in factors.locals],
        bond_dims=factors.bond_dims[1:-1],
        eps=factors.truncation_eps,
        bound=truncation_bound(factors.truncation_eps),
        central_index=factors.central_index,
        central_params=counts.central,
        auxiliary_params=counts.auxiliary,
        gamma=counts.gamma,
        files=files,
        frobenius_norm=norm,
        max_abs_error=float(np.max(np.abs(diff))) if diff.size else 0.0,
        relative_error=frobenius_norm(diff) / norm if norm > 0 else 0.0,
    )
    atomic_write_text(out_dir / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")
    logger.info("wrote %d local tensors to %s", len(files), out_dir)
    return manifest


def reconstruct_from_dir(
    manifest_dir: Union[str, Path],
) -> tuple[np.ndarray, DecompositionManifest]:
    """
    Rebuild the matrix from a directory written by ``decompose_to_dir``.

    Raises:
        FileNotFoundError: If the manifest or a local tensor is missing.
        TensorFileError: If the manifest disagrees with the stored tensors.
    """
    manifest_dir = Path(manifest_dir)
    manifest_path = manifest_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no decomposition manifest at {manifest_path}")
    try:
        text = manifest_path.read_text(encoding="utf-8")
        manifest = DecompositionManifest.model_validate_json(text)
    except ValueError as e:
        raise TensorFileError(f"invalid decomposition manifest: {e}") from e
    locals_ = [read_tensor(manifest_dir / name) for name in manifest.files]
    if [list(t.shape) for t in locals_] != manifest.shapes:
        raise TensorFileError("stored tensor shapes do not match the manifest")
    return reconstruct(MpoFactors(locals=locals_)), manifest


# Truncation bound


def random_bound_trial(trial: int, max_dim: int, seed: int) -> BoundTrial:
    """One random (matrix, plan, caps) decomposition checked against its bound."""
    rng = np.random.default_rng([seed, trial])
    rows = int(rng.integers(2, max_dim + 1))
    cols = int(rng.integers(2, max_dim + 1))
    m = int(rng.integers(2, 6))
    plan = plan_factorization(rows, cols, m)
    caps = [int(rng.integers(1, d + 1)) for d in bond_dimensions(plan)]
    w = rng.standard_normal((rows, cols))

    factors = decompose(w, plan.with_caps(caps))
    error = frobenius_norm(w - reconstruct(factors))
    bound = truncation_bound(factors.truncation_eps)
    ok = error <= bound * (1.0 + BOUND_RTOL) + BOUND_ATOL * frobenius_norm(w)
    return BoundTrial(
        trial=trial, rows=rows, cols=cols, m=m, caps=caps, error=error, bound=bound, ok=ok
    )


def verify_truncation_bound(
    trials: int,
    max_dim: int,
    seed: int,
    progress_callback: Optional[ProgressCallback] = None,
) -> list[BoundTrial]:
    """Run ``trials`` independent bound checks; trial t draws from seed (seed, t)."""
    if trials < 1 or max_dim < 2:
        raise ValueError(f"need trials >= 1 and max_dim >= 2, got {trials}, {max_dim}")
    results = []
    for t in range(trials):
        results.append(random_bound_trial(t, max_dim, seed))
        if progress_callback:
            progress_callback(t + 1, trials)
    return results


# Training


def resolve_plans(config: ExperimentConfig) -> SlotPlans:
    """Explicit plans from the config, or middle-out plans for ``model.m``."""
    if isinstance(config.model.plans, SlotPlans):
        return config.model.plans
    d_model, d_ff, m = config.task.d_model, config.task.d_ff, config.model.m
    return SlotPlans(
        w1=plan_factorization(d_model, d_ff, m), w2=plan_factorization(d_ff, d_model, m)
    )


def build_student(config: ExperimentConfig) -> MpoeExpertBank:
    """Random dense FFN replicated into an MPOE bank, plus a fresh gate."""
    rng = np.random.default_rng(config.model.seed)
    d_model, d_ff = config.task.d_model, config.task.d_ff
    w1 = rng.normal(0.0, d_model**-0.5, size=(d_model, d_ff))
    w2 = rng.normal(0.0, d_ff**-0.5, size=(d_ff, d_model))
    gate_settings = config.model.gate
    gate = init_gate(
        d_model,
        config.model.n_experts,
        rng,
        k=gate_settings.k,
        kind=gate_settings.kind,
        noise=gate_settings.noise,
    )
    plans = resolve_plans(config)
    return init_from_dense(w1, w2, plans.w1, plans.w2, config.model.n_experts, gate)


def update_config(config: ExperimentConfig) -> MaskedUpdateConfig:
    opt = config.optimizer
    lr = opt.lr if opt.lr is not None else warmup_lr(1, opt.warmup.d_model, opt.warmup.warmup_steps)
    return MaskedUpdateConfig(
        learning_rate=lr,
        mask_probability=opt.p_b,
        granularity=opt.granularity,
        momentum=opt.momentum,
        seed=opt.seed,
    )


def step_lr(config: ExperimentConfig, step: int) -> float:
    """Learning rate of 1-based ``step``; warmup wins over a constant lr."""
    warmup = config.optimizer.warmup
    if warmup is not None:
        return warmup_lr(step, warmup.d_model, warmup.warmup_steps)
    return config.optimizer.lr


def dataset_loss(bank: Bank, task: SyntheticTask, seed: int) -> float:
    """Loss over the whole dataset; noisy gates draw from a fixed stream."""
    pred, _ = forward(bank, task.inputs, np.random.default_rng(seed))
    loss, _ = mse_loss(pred, task.targets)
    return loss


@dataclass(frozen=True)
class TrainingResult:
    """Everything a training run produced."""

    summary: TrainingSummary
    loss_curve: list[tuple[int, float, float, bool]]
    initial_bank: MpoeExpertBank
    bank: MpoeExpertBank
    baseline: Optional[DenseMoeBank]
    report: RedundancyReport


def _train_loop(
    state: TrainState,
    task: SyntheticTask,
    config: ExperimentConfig,
    upd: MaskedUpdateConfig,
    progress_callback: Optional[ProgressCallback] = None,
) -> tuple[TrainState, list[tuple[int, float, float, bool]]]:
    opt = config.optimizer
    data_rng = np.random.default_rng([opt.seed, 1])
    gate_rng = np.random.default_rng([config.model.seed, 2])
    total = config.total_steps
    curve = []
    for _ in range(opt.epochs):
        for idx in task.batches(opt.batch_size, data_rng):
            step = state.step + 1
            lr = step_lr(config, step)
            xb, yb = task.inputs[idx], task.targets[idx]
            mask = draw_central_mask(state, upd)
            pred, trace = forward(state.bank, xb, gate_rng)
            loss, grad = mse_loss(pred, yb)
            grads = backward(state.bank, xb, grad, trace, include_central=not central_frozen(mask))
            state = masked_step(state, grads, upd, mask=mask, lr=lr)
            curve.append((step, loss, lr, state.last_central_updated))
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss diverged at step {step}")
            if progress_callback:
                progress_callback(step, total)
    return state, curve


def run_training(
    config: ExperimentConfig,
    with_baseline: bool = True,
    probes: int = 256,
    progress_callback: Optional[ProgressCallback] = None,
) -> TrainingResult:
    """
    Train an MPOE bank on the synthetic task with masked central updates.

    The dense baseline starts from the MPOE bank's reconstructed weights and
    sees the same batches, gate noise and learning rates.

    Artifacts named in ``config.outputs`` are written at the end.
    """
    task = SyntheticTask.generate(config.task)
    initial = build_student(config)
    upd = update_config(config)
    eval_seed = config.model.seed + 3

    state, curve = _train_loop(init_train_state(initial, upd), task, config, upd, progress_callback)
    bank = state.bank

    baseline = None
    baseline_initial = baseline_final = None
    if with_baseline:
        dense0 = DenseMoeBank.from_mpoe(initial)
        baseline_initial = dataset_loss(dense0, task, eval_seed)
        dense_state, _ = _train_loop(init_train_state(dense0, upd), task, config, upd)
        baseline = dense_state.bank
        baseline_final = dataset_loss(baseline, task, eval_seed)

    summary = TrainingSummary(
        steps=state.step,
        initial_loss=dataset_loss(initial, task, eval_seed),
        final_loss=dataset_loss(bank, task, eval_seed),
        central_update_fraction=state.central_update_fraction,
        baseline_initial_loss=baseline_initial,
        baseline_final_loss=baseline_final,
        params=bank_param_counts(bank),
    )
    probe_rng = np.random.default_rng([config.task.seed, 4])
    probe_inputs = probe_rng.standard_normal((probes, config.task.d_model))
    report = redundancy_report(bank, probe_inputs, initial_bank=initial)
    logger.info(
        "trained %d steps: loss %.4g -> %.4g, central updated on %.1f%% of steps",
        summary.steps,
        summary.initial_loss,
        summary.final_loss,
        100 * summary.central_update_fraction,
    )

    outputs = config.outputs
    if outputs.loss_curve_path:
        save_loss_curve(curve, outputs.loss_curve_path)
    if outputs.checkpoint_path:
        save_checkpoint(bank, outputs.checkpoint_path, step=state.step)
    if outputs.report_path:
        save_report(report, outputs.report_path)
    return TrainingResult(
        summary=summary,
        loss_curve=curve,
        initial_bank=initial,
        bank=bank,
        baseline=baseline,
        report=report,
    )


def run_sweep(
    config: ExperimentConfig,
    m_list: Sequence[int],
    p_b: Optional[float] = 1.0,
    progress_callback: Optional[ProgressCallback] = None,
) -> list[SweepRow]:
    """
    Train once per m with automatic plans and tabulate parameters and final loss.

    With the default ``p_b=1.0`` every central update is discarded, so only
    the expert-specific auxiliary tensors (plus biases and gate) learn and the
    rows compare the per-expert budget each m leaves. ``p_b=None`` keeps the
    config's optimizer setting.

    Raises:
        ValueError: If some m < 2 (nothing to share), the list is empty or
            p_b lies outside [0, 1].
    """
    if not m_list:
        raise ValueError("m list is empty")
    bad = [m for m in m_list if m < 2]
    if bad:
        raise ValueError(f"m must be >= 2 for a shared central tensor, got {bad}")
    if p_b is not None and not 0.0 <= p_b <= 1.0:
        raise ValueError(f"p_b must lie in [0, 1], got {p_b}")

    optimizer = config.optimizer
    if p_b is not None:
        optimizer = optimizer.model_copy(update={"p_b": p_b})

    rows = []
    for idx, m in enumerate(m_list):
        model = config.model.model_copy(update={"m": m, "plans": "auto"})
        run_config = config.model_copy(
            update={"model": model, "optimizer": optimizer, "outputs": type(config.outputs)()}
        )
        result = run_training(run_config, with_baseline=False)
        params = result.summary.params
        rows.append(
            SweepRow(
                m=m,
                central=params.shared,
                auxiliary_per_expert=params.per_expert,
                expert_total=params.total,
                mpo_full_params=params.shared + params.per_expert,
                gamma=params.gamma,
                final_loss=result.summary.final_loss,
            )
        )
        if progress_callback:
            progress_callback(idx + 1, len(m_list))
    return rows
