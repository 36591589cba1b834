"""Gradient-masked SGD for MPOE banks and the warmup learning-rate schedule.

Shared central tensors receive ``lr * g * (1 - b)`` with a Bernoulli(p_b)
mask ``b``; auxiliary tensors, biases and gate weights always receive the
plain SGD step.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from mpoe.errors import ShapeError
from mpoe.layer import Bank, Gradients, is_central_key
from mpoe.models import MaskedUpdateConfig, MaskGranularity

Mask = Union[float, dict[str, np.ndarray]]


@dataclass(frozen=True)
class TrainState:
    """Optimizer state after ``step`` updates."""

    bank: Bank
    rng: np.random.Generator
    step: int = 0
    central_updates: int = 0
    last_central_updated: bool = False
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def central_update_fraction(self) -> float:
        """Share of steps on which some central element moved."""
        return self.central_updates / self.step if self.step else 0.0


def init_train_state(bank: Bank, cfg: MaskedUpdateConfig) -> TrainState:
    """Fresh state whose mask stream is seeded from ``cfg.seed``."""
    return TrainState(bank=bank, rng=np.random.default_rng(cfg.seed))


def generate_mask(
    p_b: float,
    shape: Optional[Sequence[int]],
    rng: np.random.Generator,
) -> Union[float, np.ndarray]:
    """
    Bernoulli(p_b) mask: 1.0 discards the update, 0.0 keeps it.

    Args:
        p_b: Discard probability in [0, 1].
        shape: None for a single per-step scalar, else the tensor extents.
        rng: Mask stream.
    """
    if not 0.0 <= p_b <= 1.0:
        raise ValueError(f"p_b must lie in [0, 1], got {p_b}")
    if shape is None:
        return 1.0 if rng.random() < p_b else 0.0
    return (rng.random(tuple(shape)) < p_b).astype(np.float64)


def draw_central_mask(state: TrainState, cfg: MaskedUpdateConfig) -> Mask:
    """Draw this step's mask for every central tensor of ``state.bank``."""
    if cfg.granularity is MaskGranularity.PER_STEP_SCALAR:
        return generate_mask(cfg.mask_probability, None, state.rng)
    return {
        name: generate_mask(cfg.mask_probability, p.shape, state.rng)
        for name, p in state.bank.to_params().items()
        if is_central_key(name)
    }


def central_frozen(mask: Mask) -> bool:
    """True when the mask discards every central element this step."""
    if isinstance(mask, dict):
        return all(bool(np.all(b == 1.0)) for b in mask.values())
    return mask == 1.0


def masked_step(
    state: TrainState,
    grads: Gradients,
    cfg: MaskedUpdateConfig,
    mask: Optional[Mask] = None,
    lr: Optional[float] = None,
) -> TrainState:
    """
    Apply one update and advance the step counter.

    Args:
        state: Current state.
        grads: Output of ``layer.backward`` on ``state.bank``.
        cfg: Update rule.
        mask: Central mask from ``draw_central_mask``; drawn here when omitted.
        lr: Step size overriding ``cfg.learning_rate`` (warmup schedules).

    Returns:
        New TrainState; the input state is not modified.

    Raises:
        ShapeError: If a gradient does not match its parameter.
        KeyError: If a non-central gradient is missing or unknown.
    """
    if mask is None:
        mask = draw_central_mask(state, cfg)
    lr = cfg.learning_rate if lr is None else lr
    params = state.bank.to_params()
    unknown = set(grads.params) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")

    updated: dict[str, np.ndarray] = {}
    velocity = dict(state.velocity)
    central_moved = False
    for name, p in params.items():
        g = grads.params.get(name)
        central = is_central_key(name)
        b = (mask.get(name, 0.0) if isinstance(mask, dict) else mask) if central else 0.0
        if g is None:
            if central and np.all(b == 1.0):
                continue
            raise KeyError(f"missing gradient for {name}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient of {name} is {g.shape}, parameter is {p.shape}")

        if central and np.ndim(b) == 0 and b == 1.0:
            continue
        step_dir = g
        if cfg.momentum > 0.0:
            v = cfg.momentum * velocity.get(name, np.zeros_like(p)) + g
            if central and np.ndim(b) > 0:
                v = np.where(b == 1.0, velocity.get(name, np.zeros_like(p)), v)
            velocity[name] = v
            step_dir = v
        if central and np.ndim(b) > 0:
            step_dir = step_dir * (1.0 - b)
            central_moved = central_moved or bool(np.any(b == 0.0))
        elif central:
            central_moved = True
        updated[name] = p - lr * step_dir

    bank = state.bank.with_params(updated)
    return replace(
        state,
        bank=bank,
        step=state.step + 1,
        central_updates=state.central_updates + int(central_moved),
        last_central_updated=central_moved,
        velocity=velocity,
    )


def warmup_lr(step: int, d_model: int, warmup_steps: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup_steps^-1.5)."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return d_model**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)

