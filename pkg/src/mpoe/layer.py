"""Expert banks: MPOE (shared central tensors) and the dense mixture-of-experts baseline.

Each expert is a feed-forward block E_i(x) = ReLU(x W1_i + b1_i) W2_i + b2_i and
the layer output is y = sum_i G(x)_i E_i(x). In the MPOE bank both W1_i and
W2_i are MPO chains that share one central tensor per slot across all experts
and keep their auxiliary tensors per expert.
"""

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from mpoe.errors import ShapeError, StaleTraceError
from mpoe.gating import GateBatch, GateConfig, gate_backward, route
from mpoe.models import BankParamReport, FactorizationPlan, WeightSlot
from mpoe.mpo import MpoFactors, count_params, decompose, local_gradients, reconstruct

logger = logging.getLogger(__name__)

SLOTS = (WeightSlot.W1, WeightSlot.W2)
GATE_WEIGHTS = "gate.weights"
GATE_NOISE_WEIGHTS = "gate.noise_weights"

_bank_ids = itertools.count()


def _next_uid() -> int:
    return next(_bank_ids)


def central_key(slot: WeightSlot) -> str:
    return f"{slot.value}.central"


def aux_key(slot: WeightSlot, expert: int, position: int) -> str:
    return f"{slot.value}.aux.{expert}.{position}"


def bias_key(slot: WeightSlot) -> str:
    return f"{slot.value}.bias"


def dense_key(slot: WeightSlot) -> str:
    return f"{slot.value}.dense"


def is_central_key(name: str) -> bool:
    """True for the shared central tensors (the only masked parameters)."""
    return name.endswith(".central")


def _gate_params(gate: GateConfig) -> dict[str, np.ndarray]:
    params = {GATE_WEIGHTS: gate.gate_weights}
    if gate.noise_weights is not None:
        params[GATE_NOISE_WEIGHTS] = gate.noise_weights
    return params


def _gate_with(gate: GateConfig, params: dict[str, np.ndarray]) -> GateConfig:
    return replace(
        gate,
        gate_weights=params.get(GATE_WEIGHTS, gate.gate_weights),
        noise_weights=params.get(GATE_NOISE_WEIGHTS, gate.noise_weights),
    )


@dataclass(frozen=True)
class MpoeExpertBank:
    """n experts sharing one central tensor per weight slot."""

    plans: dict[WeightSlot, FactorizationPlan]
    centrals: dict[WeightSlot, np.ndarray]
    auxiliaries: dict[WeightSlot, list[list[np.ndarray]]]
    biases: dict[WeightSlot, np.ndarray]
    gate: GateConfig
    uid: int = field(default_factory=_next_uid, init=False, compare=False)

    def __post_init__(self):
        n = self.gate.n_experts
        for slot in SLOTS:
            plan = self.plans[slot]
            if len(self.auxiliaries[slot]) != n:
                raise ShapeError(
                    f"{slot.value}: {len(self.auxiliaries[slot])} auxiliary sets for {n} experts"
                )
            for i in range(n):
                f = self.factors(slot, i)
                if f.row_factors != plan.row_factors or f.col_factors != plan.col_factors:
                    raise ShapeError(f"{slot.value} expert {i} does not follow its plan")
            if self.biases[slot].shape != (n, plan.cols):
                raise ShapeError(
                    f"{slot.value} biases are {self.biases[slot].shape}, expected {(n, plan.cols)}"
                )
        if self.plans[WeightSlot.W1].rows != self.gate.d_model:
            raise ShapeError("gate d_model does not match the w1 rows")

    @property
    def n_experts(self) -> int:
        return self.gate.n_experts

    @property
    def d_model(self) -> int:
        return self.plans[WeightSlot.W1].rows

    @property
    def d_ff(self) -> int:
        return self.plans[WeightSlot.W1].cols

    def factors(self, slot: WeightSlot, expert: int) -> MpoFactors:
        """MPO chain of one expert's weight: shared central plus its auxiliaries."""
        if not 0 <= expert < self.n_experts:
            raise IndexError(f"expert {expert} out of range [0, {self.n_experts})")
        return MpoFactors.assemble(self.centrals[slot], self.auxiliaries[slot][expert])

    def expert_weight(self, slot: WeightSlot, expert: int) -> np.ndarray:
        return reconstruct(self.factors(slot, expert))

    def aux_positions(self, slot: WeightSlot) -> list[int]:
        """Chain positions of the auxiliary tensors (all but the central one)."""
        m = self.plans[slot].m
        return [k for k in range(m) if k != m // 2]

    def to_params(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable parameter."""
        params: dict[str, np.ndarray] = {}
        for slot in SLOTS:
            params[central_key(slot)] = self.centrals[slot]
            positions = self.aux_positions(slot)
            for i, aux in enumerate(self.auxiliaries[slot]):
                for pos, t in zip(positions, aux):
                    params[aux_key(slot, i, pos)] = t
            params[bias_key(slot)] = self.biases[slot]
        params.update(_gate_params(self.gate))
        return params

    def with_params(self, params: dict[str, np.ndarray]) -> "MpoeExpertBank":
        """New bank with the named parameters replaced; unnamed ones are kept."""
        centrals, auxiliaries, biases = {}, {}, {}
        for slot in SLOTS:
            centrals[slot] = params.get(central_key(slot), self.centrals[slot])
            positions = self.aux_positions(slot)
            auxiliaries[slot] = [
                [params.get(aux_key(slot, i, pos), t) for pos, t in zip(positions, aux)]
                for i, aux in enumerate(self.auxiliaries[slot])
            ]
            biases[slot] = params.get(bias_key(slot), self.biases[slot])
        return MpoeExpertBank(
            plans=self.plans,
            centrals=centrals,
            auxiliaries=auxiliaries,
            biases=biases,
            gate=_gate_with(self.gate, params),
        )


@dataclass(frozen=True)
class DenseMoeBank:
    """n independent dense experts (the baseline without parameter sharing)."""

    weights: dict[WeightSlot, np.ndarray]
    biases: dict[WeightSlot, np.ndarray]
    gate: GateConfig
    uid: int = field(default_factory=_next_uid, init=False, compare=False)

    def __post_init__(self):
        n = self.gate.n_experts
        for slot in SLOTS:
            w = self.weights[slot]
            if w.ndim != 3 or w.shape[0] != n:
                raise ShapeError(f"{slot.value} weights must be n x rows x cols, got {w.shape}")
            if self.biases[slot].shape != (n, w.shape[2]):
                raise ShapeError(f"{slot.value} biases are {self.biases[slot].shape}")
        if self.weights[WeightSlot.W1].shape[1] != self.gate.d_model:
            raise ShapeError("gate d_model does not match the w1 rows")

    @property
    def n_experts(self) -> int:
        return self.gate.n_experts

    @property
    def d_model(self) -> int:
        return self.weights[WeightSlot.W1].shape[1]

    @property
    def d_ff(self) -> int:
        return self.weights[WeightSlot.W1].shape[2]

    def expert_weight(self, slot: WeightSlot, expert: int) -> np.ndarray:
        if not 0 <= expert < self.n_experts:
            raise IndexError(f"expert {expert} out of range [0, {self.n_experts})")
        return self.weights[slot][expert]

    def to_params(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for slot in SLOTS:
            params[dense_key(slot)] = self.weights[slot]
            params[bias_key(slot)] = self.biases[slot]
        params.update(_gate_params(self.gate))
        return params

    def with_params(self, params: dict[str, np.ndarray]) -> "DenseMoeBank":
        return DenseMoeBank(
            weights={s: params.get(dense_key(s), self.weights[s]) for s in SLOTS},
            biases={s: params.get(bias_key(s), self.biases[s]) for s in SLOTS},
            gate=_gate_with(self.gate, params),
        )

    @classmethod
    def from_mpoe(cls, bank: MpoeExpertBank) -> "DenseMoeBank":
        """Materialize every expert's reconstructed weights as independent matrices."""
        return cls(
            weights={
                s: np.stack([bank.expert_weight(s, i) for i in range(bank.n_experts)])
                for s in SLOTS
            },
            biases={s: bank.biases[s].copy() for s in SLOTS},
            gate=bank.gate,
        )


Bank = Union[MpoeExpertBank, DenseMoeBank]


@dataclass(frozen=True)
class RoutingTrace:
    """What forward saw: the bank, the batch size, gate results and expert weights."""

    bank_uid: int
    batch_size: int
    gate: GateBatch
    weights: dict[WeightSlot, list[np.ndarray]]

    @property
    def selected(self) -> list[list[int]]:
        """Experts routed for every row."""
        return [sorted(int(i) for i in row) for row in self.gate.selected]

    @property
    def gate_values(self) -> np.ndarray:
        """B x n gate weights (zero off the routed experts)."""
        return self.gate.weights


@dataclass(frozen=True)
class Gradients:
    """dL/d(parameter) keyed like ``Bank.to_params``, plus dL/dx."""

    params: dict[str, np.ndarray]
    x: np.ndarray


def init_from_dense(
    w1: np.ndarray,
    w2: np.ndarray,
    plan1: FactorizationPlan,
    plan2: FactorizationPlan,
    n: int,
    gate: GateConfig,
) -> MpoeExpertBank:
    """
    Build an MPOE bank whose n experts all start as the given dense FFN.

    Each slot is decomposed once without truncation; the central tensor is
    shared and the auxiliary set is copied n times. Biases start at zero.

    Raises:
        ShapeError: If a plan does not factorize its matrix.
        ValueError: If a plan has fewer than two local tensors, or n does not
            match the gate.
    """
    if n < 1 or gate.n_experts != n:
        raise ValueError(f"gate routes {gate.n_experts} experts, bank asked for {n}")
    plans = {WeightSlot.W1: plan1.with_caps(None), WeightSlot.W2: plan2.with_caps(None)}
    centrals, auxiliaries, biases = {}, {}, {}
    for slot, w in zip(SLOTS, (w1, w2)):
        plan = plans[slot]
        if plan.m < 2:
            raise ValueError(f"{slot.value}: a shared bank needs m >= 2, got m={plan.m}")
        f = decompose(np.asarray(w, dtype=np.float64), plan)
        centrals[slot] = f.central
        auxiliaries[slot] = [[t.copy() for t in f.auxiliaries()] for _ in range(n)]
        biases[slot] = np.zeros((n, plan.cols))
    if w1.shape[1] != w2.shape[0] or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"w1 {w1.shape} and w2 {w2.shape} do not form an FFN")
    bank = MpoeExpertBank(
        plans=plans, centrals=centrals, auxiliaries=auxiliaries, biases=biases, gate=gate
    )
    logger.debug("initialized MPOE bank: n=%d, d_model=%d, d_ff=%d", n, bank.d_model, bank.d_ff)
    return bank


def expert_weight(bank: Bank, slot: WeightSlot, expert: int) -> np.ndarray:
    """Full weight matrix of one expert in one slot."""
    return bank.expert_weight(WeightSlot(slot), expert)


def _check_batch(bank: Bank, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bank.d_model:
        raise ShapeError(f"input must be batch x {bank.d_model}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    return x


def forward(
    bank: Bank,
    x: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, RoutingTrace]:
    """
    Route every row and combine the routed experts' outputs with the gate weights.

    Args:
        bank: MPOE or dense bank.
        x: batch x d_model inputs.
        rng: Random generator for noisy gates.

    Returns:
        (y, trace) with y of shape batch x d_model.
    """
    x = _check_batch(bank, x)
    gate = route(x, bank.gate, rng)
    weights = {s: [bank.expert_weight(s, i) for i in range(bank.n_experts)] for s in SLOTS}
    w1s, w2s = weights[WeightSlot.W1], weights[WeightSlot.W2]
    b1, b2 = bank.biases[WeightSlot.W1], bank.biases[WeightSlot.W2]

    y = np.zeros_like(x)
    for i in range(bank.n_experts):
        rows = np.flatnonzero(gate.mask[:, i])
        if rows.size == 0:
            continue
        hidden = np.maximum(x[rows] @ w1s[i] + b1[i], 0.0)
        y[rows] += gate.weights[rows, i, None] * (hidden @ w2s[i] + b2[i])

    trace = RoutingTrace(bank_uid=bank.uid, batch_size=x.shape[0], gate=gate, weights=weights)
    return y, trace


def expert_outputs(bank: Bank, x: np.ndarray) -> np.ndarray:
    """Ungated outputs of every expert on every row: n x batch x d_model."""
    x = _check_batch(bank, x)
    out = []
    for i in range(bank.n_experts):
        pre = x @ bank.expert_weight(WeightSlot.W1, i) + bank.biases[WeightSlot.W1][i]
        hidden = np.maximum(pre, 0.0)
        out.append(hidden @ bank.expert_weight(WeightSlot.W2, i) + bank.biases[WeightSlot.W2][i])
    return np.stack(out)


def backward(
    bank: Bank,
    x: np.ndarray,
    grad_y: np.ndarray,
    trace: RoutingTrace,
    include_central: bool = True,
) -> Gradients:
    """
    Gradients of the loss with respect to every parameter and the input.

    Dense expert gradients come from standard FFN back-propagation. For the
    MPOE bank each routed expert's dL/dW is contracted against the other
    local tensors of its chain; the shared central gradient is the sum of the
    experts' contributions, accumulated in expert-index order.

    Args:
        bank: The bank ``trace`` was produced with.
        x: The batch passed to ``forward``.
        grad_y: dL/dy, same shape as y.
        trace: Routing trace from the matching ``forward`` call.
        include_central: When False the central-tensor contraction is skipped
            and no central gradient is returned.

    Raises:
        StaleTraceError: If the trace came from another bank or batch.
    """
    x = _check_batch(bank, x)
    if trace.bank_uid != bank.uid or trace.batch_size != x.shape[0]:
        raise StaleTraceError("routing trace does not belong to this bank and batch")
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != x.shape:
        raise ShapeError(f"grad_y is {grad_y.shape}, expected {x.shape}")

    n = bank.n_experts
    gate = trace.gate
    w1s, w2s = trace.weights[WeightSlot.W1], trace.weights[WeightSlot.W2]
    b1, b2 = bank.biases[WeightSlot.W1], bank.biases[WeightSlot.W2]

    d_w: dict[WeightSlot, list[Optional[np.ndarray]]] = {s: [None] * n for s in SLOTS}
    d_b = {s: np.zeros_like(bank.biases[s]) for s in SLOTS}
    grad_weights = np.zeros_like(gate.weights)
    dx = np.zeros_like(x)

    for i in range(n):
        rows = np.flatnonzero(gate.mask[:, i])
        if rows.size == 0:
            continue
        xr, gr = x[rows], grad_y[rows]
        pre = xr @ w1s[i] + b1[i]
        hidden = np.maximum(pre, 0.0)
        out = hidden @ w2s[i] + b2[i]
        grad_weights[rows, i] = np.sum(gr * out, axis=1)

        g_out = gate.weights[rows, i, None] * gr
        d_w[WeightSlot.W2][i] = hidden.T @ g_out
        d_b[WeightSlot.W2][i] = g_out.sum(axis=0)
        g_pre = (g_out @ w2s[i].T) * (pre > 0.0)
        d_w[WeightSlot.W1][i] = xr.T @ g_pre
        d_b[WeightSlot.W1][i] = g_pre.sum(axis=0)
        dx[rows] += g_pre @ w1s[i].T

    d_gate, d_noise, dx_gate = gate_backward(x, bank.gate, gate, grad_weights)
    params: dict[str, np.ndarray] = {GATE_WEIGHTS: d_gate}
    if d_noise is not None:
        params[GATE_NOISE_WEIGHTS] = d_noise
    for slot in SLOTS:
        params[bias_key(slot)] = d_b[slot]

    if isinstance(bank, DenseMoeBank):
        for slot in SLOTS:
            params[dense_key(slot)] = np.stack(
                [
                    np.zeros_like(bank.weights[slot][i]) if g is None else g
                    for i, g in enumerate(d_w[slot])
                ]
            )
    else:
        params.update(_mpo_gradients(bank, d_w, include_central))

    return Gradients(params=params, x=dx + dx_gate)


def _mpo_gradients(
    bank: MpoeExpertBank,
    d_w: dict[WeightSlot, list[Optional[np.ndarray]]],
    include_central: bool,
) -> dict[str, np.ndarray]:
    """Project per-expert dL/dW onto the shared central and per-expert auxiliaries."""
    params: dict[str, np.ndarray] = {}
    for slot in SLOTS:
        positions = bank.aux_positions(slot)
        center = bank.plans[slot].m // 2
        central_grad = np.zeros_like(bank.centrals[slot])
        for i in range(bank.n_experts):
            g = d_w[slot][i]
            if g is None:
                for pos, t in zip(positions, bank.auxiliaries[slot][i]):
                    params[aux_key(slot, i, pos)] = np.zeros_like(t)
                continue
            skip = () if include_central else (center,)
            local = local_gradients(bank.factors(slot, i), g, skip=skip)
            if include_central:
                central_grad += local[center]
            for pos in positions:
                params[aux_key(slot, i, pos)] = local[pos]
        if include_central:
            params[central_key(slot)] = central_grad
    return params


def efficiency_ratio(n: int, gamma: float) -> float:
    """(n + gamma) / (n (gamma + 1)): MPOE-to-MoE expert parameter ratio."""
    if n < 1 or not gamma > 0:
        raise ValueError(f"need n >= 1 and gamma > 0, got n={n}, gamma={gamma}")
    return (n + gamma) / (n * (gamma + 1))


def bank_param_counts(bank: Bank) -> BankParamReport:
    """
    Element counts of a bank.

    ``total`` and ``dense_equivalent_total`` count expert matrices only, so
    their ratio equals ``efficiency_ratio(n, gamma)``; biases and gate
    parameters are reported separately.
    """
    n = bank.n_experts
    bias_total = int(sum(bank.biases[s].size for s in SLOTS))
    gate_total = int(sum(p.size for p in _gate_params(bank.gate).values()))
    if isinstance(bank, DenseMoeBank):
        per_expert = int(sum(bank.weights[s][0].size for s in SLOTS))
        shared = 0
        gamma = 0.0
    else:
        counts = [count_params(bank.factors(s, 0)) for s in SLOTS]
        shared = sum(c.central for c in counts)
        per_expert = sum(c.auxiliary for c in counts)
        gamma = shared / per_expert
    total = shared + n * per_expert
    dense_equivalent = n * (shared + per_expert)
    return BankParamReport(
        n_experts=n,
        shared=shared,
        per_expert=per_expert,
        total=total,
        dense_equivalent_total=dense_equivalent,
        gamma=gamma,
        bias_total=bias_total,
        gate_total=gate_total,
        ratio=total / dense_equivalent,
    )


def add_experts(bank: MpoeExpertBank, count: int, source: int = 0) -> MpoeExpertBank:
    """
    Grow the bank by ``count`` experts that share the existing central tensors.

    New experts copy the auxiliaries, biases and gate columns of ``source``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0 <= source < bank.n_experts:
        raise IndexError(f"source expert {source} out of range")
    auxiliaries = {
        s: bank.auxiliaries[s]
        + [[t.copy() for t in bank.auxiliaries[s][source]] for _ in range(count)]
        for s in SLOTS
    }
    biases = {
        s: np.concatenate(
            [bank.biases[s], np.repeat(bank.biases[s][source : source + 1], count, axis=0)]
        )
        for s in SLOTS
    }

    def widen(w: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if w is None:
            return None
        return np.concatenate([w, np.repeat(w[:, source : source + 1], count, axis=1)], axis=1)

    gate = replace(
        bank.gate,
        gate_weights=widen(bank.gate.gate_weights),
        noise_weights=widen(bank.gate.noise_weights),
    )
    return MpoeExpertBank(
        plans=bank.plans, centrals=bank.centrals, auxiliaries=auxiliaries, biases=biases, gate=gate
    )
