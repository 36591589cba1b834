"""Pydantic models for plans, configs, manifests and reports."""

from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mpoe.errors import ShapeError


class GateKind(str, Enum):
    """Routing rule used by the gating network."""

    SOFTMAX = "softmax"
    TOPK = "topk"
    SWITCH = "switch"


class MaskGranularity(str, Enum):
    """Whether the central-tensor mask is one draw per step or one per element."""

    PER_STEP_SCALAR = "per_step_scalar"
    PER_ELEMENT = "per_element"


class NormalizeMode(str, Enum):
    """Post-decomposition rescaling of local tensors."""

    NONE = "none"
    BALANCE = "balance"


class WeightSlot(str, Enum):
    """The two weight matrices of a feed-forward expert."""

    W1 = "w1"
    W2 = "w2"


class KernelKind(str, Enum):
    """Kernel used by the MMD estimator."""

    RBF = "rbf"
    LINEAR = "linear"


class DType(str, Enum):
    """Payload element type of a TensorFile."""

    F64 = "f64"
    F32 = "f32"


class FactorizationPlan(BaseModel):
    """Row/column factor lists (and optional bond caps) of one MPO decomposition."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    row_factors: list[int] = Field(..., min_length=1, description="i_k, one per local tensor")
    col_factors: list[int] = Field(..., min_length=1, description="j_k, one per local tensor")
    bond_caps: Optional[list[int]] = Field(
        None, description="Upper bounds on d_1..d_{m-1}; absent means no truncation"
    )

    @field_validator("row_factors", "col_factors")
    @classmethod
    def factors_positive(cls, v: list[int]) -> list[int]:
        """Every factor must be a positive integer."""
        if any(f < 1 for f in v):
            raise ValueError(f"factors must be >= 1, got {v}")
        return v

    @model_validator(mode="after")
    def check_lengths(self) -> "FactorizationPlan":
        """Row and column lists share the length m; caps have length m-1."""
        if len(self.row_factors) != len(self.col_factors):
            raise ValueError(
                f"row_factors ({len(self.row_factors)}) and col_factors "
                f"({len(self.col_factors)}) must have the same length"
            )
        if self.bond_caps is not None:
            if len(self.bond_caps) != self.m - 1:
                raise ValueError(
                    f"bond_caps must have {self.m - 1} entries, got {len(self.bond_caps)}"
                )
            if any(c < 1 for c in self.bond_caps):
                raise ValueError(f"bond caps must be >= 1, got {self.bond_caps}")
        return self

    @property
    def m(self) -> int:
        """Number of local tensors."""
        return len(self.row_factors)

    @property
    def rows(self) -> int:
        """I = product of row factors."""
        out = 1
        for f in self.row_factors:
            out *= f
        return out

    @property
    def cols(self) -> int:
        """J = product of column factors."""
        out = 1
        for f in self.col_factors:
            out *= f
        return out

    @property
    def central_index(self) -> int:
        """0-based position of the central tensor (right of middle for even m)."""
        return self.m // 2

    def with_caps(self, caps: Optional[list[int]]) -> "FactorizationPlan":
        """Return a copy of this plan with different bond caps."""
        return FactorizationPlan(
            row_factors=list(self.row_factors),
            col_factors=list(self.col_factors),
            bond_caps=None if caps is None else list(caps),
        )

    def transposed(self) -> "FactorizationPlan":
        """Plan for the transposed matrix (row and column factors swapped)."""
        return FactorizationPlan(
            row_factors=list(self.col_factors),
            col_factors=list(self.row_factors),
            bond_caps=None if self.bond_caps is None else list(self.bond_caps),
        )

    def check_matrix(self, rows: int, cols: int) -> None:
        """Raise ShapeError unless this plan factorizes a rows x cols matrix."""
        if (rows, cols) != (self.rows, self.cols):
            raise ShapeError(
                f"plan factorizes {self.rows}x{self.cols}, matrix is {rows}x{cols}"
            )

    @classmethod
    def parse(cls, text: str, caps: Optional[str] = None) -> "FactorizationPlan":
        """
        Parse a plan written as ``"i=3,4,4,4,4;j=4,4,8,6,4"``.

        Args:
            text: Plan string with ``i=`` and ``j=`` parts separated by ``;``.
            caps: Optional comma-separated bond caps.

        Returns:
            FactorizationPlan.
        """
        parts: dict[str, list[int]] = {}
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            key, _, values = chunk.partition("=")
            parts[key.strip()] = [int(v) for v in values.split(",") if v.strip()]
        if "i" not in parts or "j" not in parts:
            raise ValueError(f"plan must define both i= and j=, got {text!r}")
        return cls(
            row_factors=parts["i"],
            col_factors=parts["j"],
            bond_caps=parse_int_list(caps) if caps else None,
        )


def parse_int_list(text: str) -> list[int]:
    """Parse ``"3,5,7"`` into ``[3, 5, 7]``."""
    return [int(v) for v in text.split(",") if v.strip()]


class MaskedUpdateConfig(BaseModel):
    """Hyper-parameters of the gradient-masked update rule."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(..., gt=0, description="Step size alpha")
    mask_probability: float = Field(
        0.0, ge=0.0, le=1.0, description="p_b, probability of discarding a central update"
    )
    granularity: MaskGranularity = Field(MaskGranularity.PER_STEP_SCALAR)
    momentum: float = Field(0.0, ge=0.0, lt=1.0, description="Heavy-ball momentum")
    seed: int = Field(0, ge=0, description="Seed of the mask stream")


# Experiment configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskConfig(_Strict):
    """Synthetic teacher-student regression task."""

    teacher_experts: int = Field(4, ge=1)
    d_model: int = Field(16, ge=1)
    d_ff: int = Field(32, ge=1)
    n_samples: int = Field(512, ge=1)
    noise_std: float = Field(0.01, ge=0.0)
    seed: int = Field(0, ge=0)


class GateSettings(_Strict):
    """Gate choice for the student bank."""

    kind: GateKind = GateKind.TOPK
    k: int = Field(2, ge=1)
    noise: bool = False


class SlotPlans(_Strict):
    """Explicit plans for both weight slots."""

    w1: FactorizationPlan
    w2: FactorizationPlan


class ModelConfig(_Strict):
    """Student MPOE bank."""

    n_experts: int = Field(4, ge=1)
    m: int = Field(5, ge=2, description="Local tensors per weight matrix")
    plans: Union[Literal["auto"], SlotPlans] = "auto"
    gate: GateSettings = Field(default_factory=GateSettings)
    seed: int = Field(1, ge=0)


class WarmupSettings(_Strict):
    """Inverse-square-root schedule with linear warmup."""

    d_model: int = Field(..., ge=1)
    warmup_steps: int = Field(500, ge=1)


class OptimizerSettings(_Strict):
    """Training loop and update rule."""

    lr: Optional[float] = Field(0.05, gt=0)
    warmup: Optional[WarmupSettings] = None
    p_b: float = Field(0.0, ge=0.0, le=1.0)
    granularity: MaskGranularity = MaskGranularity.PER_STEP_SCALAR
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    epochs: int = Field(125, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = Field(2, ge=0)

    @model_validator(mode="after")
    def needs_step_size(self) -> "OptimizerSettings":
        """Either a constant lr or a warmup schedule must be given."""
        if self.lr is None and self.warmup is None:
            raise ValueError("optimizer needs lr or warmup")
        return self


class OutputsConfig(_Strict):
    """Where training writes its artifacts. Missing entries are skipped."""

    report_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    loss_curve_path: Optional[Path] = None


class ExperimentConfig(_Strict):
    """Complete description of one training run."""

    task: TaskConfig = Field(default_factory=TaskConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    outputs: OutputsConfig = Field(default_factory=OutputsConfig)

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        """Cross-field checks that single nodes cannot see."""
        gate = self.model.gate
        if gate.kind is GateKind.TOPK and gate.k > self.model.n_experts:
            raise ValueError(f"gate k={gate.k} exceeds n_experts={self.model.n_experts}")
        if isinstance(self.model.plans, SlotPlans):
            w1, w2 = self.model.plans.w1, self.model.plans.w2
            if (w1.rows, w1.cols) != (self.task.d_model, self.task.d_ff):
                raise ValueError(f"w1 plan is {w1.rows}x{w1.cols}, expected d_model x d_ff")
            if (w2.rows, w2.cols) != (self.task.d_ff, self.task.d_model):
                raise ValueError(f"w2 plan is {w2.rows}x{w2.cols}, expected d_ff x d_model")
        return self

    @property
    def steps_per_epoch(self) -> int:
        """Mini-batches per pass over the dataset (last batch may be short)."""
        return -(-self.task.n_samples // self.optimizer.batch_size)

    @property
    def total_steps(self) -> int:
        """Number of optimizer steps the run will take."""
        return self.steps_per_epoch * self.optimizer.epochs


# Reports and manifests

_REPORT_CONFIG = ConfigDict(ser_json_inf_nan="constants")


class KernelSpec(BaseModel):
    """Kernel descriptor for MMD computations."""

    kind: KernelKind = KernelKind.RBF
    bandwidth: Optional[float] = Field(
        None, gt=0, description="RBF bandwidth; None selects the median heuristic"
    )


class VariationStats(BaseModel):
    """Signed parameter differences between a reference expert and another expert."""

    expert_pair: tuple[int, int]
    mean: float
    std_dev: float = Field(..., ge=0.0)
    frac_lt_1e4: float = Field(..., ge=0.0, le=1.0)
    frac_mid: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def fractions_bounded(self) -> "VariationStats":
        """The two ranges are disjoint, so their fractions cannot exceed 1."""
        if self.frac_lt_1e4 + self.frac_mid > 1.0 + 1e-12:
            raise ValueError("frac_lt_1e4 + frac_mid exceeds 1")
        return self


class MmdReport(BaseModel):
    """Empirical MMD between two expert output samples and its test threshold."""

    expert_pair: Optional[tuple[int, int]] = None
    threshold: float = Field(..., gt=0.0)
    empirical: float = Field(..., ge=0.0)
    same_distribution: bool
    m: int = Field(..., ge=1, description="Samples per set")
    alpha: float = Field(..., gt=0.0, lt=1.0)
    kernel_bound: float = Field(..., gt=0.0, description="K, supremum of the kernel")
    kernel: KernelSpec


class ParamCount(BaseModel):
    """Central/auxiliary element counts of one decomposition."""

    model_config = _REPORT_CONFIG

    central: int = Field(..., ge=0)
    auxiliary: int = Field(..., ge=0)
    gamma: float = Field(..., description="central / auxiliary, +inf when auxiliary is 0")


class BankParamReport(BaseModel):
    """Parameter accounting of an expert bank (expert matrices only in total)."""

    model_config = _REPORT_CONFIG

    n_experts: int
    shared: int = Field(..., description="Elements of the shared central tensors")
    per_expert: int = Field(..., description="Expert-specific matrix elements of one expert")
    total: int = Field(..., description="shared + n * per_expert")
    dense_equivalent_total: int = Field(..., description="n * full MPO element count")
    gamma: float
    bias_total: int
    gate_total: int
    ratio: float = Field(..., description="total / dense_equivalent_total")


class ModelScaleAccounting(BaseModel):
    """Transformer-scale parameter totals under the add/replace conventions."""

    n_layers: int
    d_model: int
    d_ff: int
    n_experts: int
    base_total: int
    ffn_per_layer: int
    moe_total: int = Field(..., description="base + n dense experts added per layer")
    mpoe_total: int = Field(..., description="base with FFN replaced by a shared bank")
    mpoe_bank_per_layer: int
    gamma: float


class RedundancyReport(BaseModel):
    """Expert-redundancy diagnostics of one bank."""

    model_config = _REPORT_CONFIG

    n_experts: int
    reference: int
    variation: list[VariationStats]
    mmd: list[MmdReport]
    params: BankParamReport
    gamma: float
    efficiency_ratio: float
    mmd_threshold_note: str
    central_unchanged: Optional[dict[str, bool]] = None


class DecompositionManifest(BaseModel):
    """Sidecar written next to the local tensors of one decomposition."""

    model_config = _REPORT_CONFIG

    plan: FactorizationPlan
    normalize: NormalizeMode
    shapes: list[list[int]]
    bond_dims: list[int]
    eps: list[float]
    bound: float
    central_index: int
    central_params: int
    auxiliary_params: int
    gamma: float
    files: list[str]
    frobenius_norm: float
    max_abs_error: float
    relative_error: float


class BoundTrial(BaseModel):
    """One random truncated decomposition checked against the truncation bound."""

    trial: int
    rows: int
    cols: int
    m: int
    caps: list[int]
    error: float
    bound: float
    ok: bool


class TrainingSummary(BaseModel):
    """Outcome of one training run."""

    model_config = _REPORT_CONFIG

    steps: int
    initial_loss: float
    final_loss: float
    central_update_fraction: float
    baseline_initial_loss: Optional[float] = None
    baseline_final_loss: Optional[float] = None
    params: BankParamReport


class SweepRow(BaseModel):
    """One factorization-manner result."""

    model_config = _REPORT_CONFIG

    m: int
    central: int
    auxiliary_per_expert: int
    expert_total: int
    mpo_full_params: int
    gamma: float
    final_loss: float


class CheckpointManifest(BaseModel):
    """Index of a saved MPOE bank."""

    format_version: int = 1
    d_model: int
    d_ff: int
    n_experts: int
    plans: SlotPlans
    gate_kind: GateKind
    k: int
    noise_enabled: bool
    step: int = 0
    files: dict[str, str]
