"""Gating networks: softmax, noisy top-k and switch (top-1) routing.

Every gate works on a batch of rows; the single-vector functions are thin
wrappers. Random draws come from a caller-supplied ``numpy.random.Generator``.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

from mpoe.errors import GateConfigError, ShapeError
from mpoe.models import GateKind


@dataclass(frozen=True)
class GateConfig:
    """Gate parameters and routing rule."""

    gate_weights: np.ndarray
    k: int = 1
    kind: GateKind = GateKind.TOPK
    noise_weights: Optional[np.ndarray] = None
    noise_enabled: bool = False

    def __post_init__(self):
        if self.gate_weights.ndim != 2:
            raise GateConfigError(
                f"gate weights must be d_model x n, got {self.gate_weights.shape}"
            )
        n = self.gate_weights.shape[1]
        if not 1 <= self.k <= n:
            raise GateConfigError(f"k={self.k} outside [1, {n}]")
        if self.noise_weights is not None and self.noise_weights.shape != self.gate_weights.shape:
            raise GateConfigError(
                f"noise weights {self.noise_weights.shape} do not match gate weights "
                f"{self.gate_weights.shape}"
            )
        if self.noise_enabled and self.noise_weights is None:
            raise GateConfigError("noise_enabled requires noise_weights")

    @property
    def n_experts(self) -> int:
        return self.gate_weights.shape[1]

    @property
    def d_model(self) -> int:
        return self.gate_weights.shape[0]

    @property
    def effective_k(self) -> int:
        """Experts kept per row under this config's routing rule."""
        if self.kind is GateKind.SWITCH:
            return 1
        if self.kind is GateKind.SOFTMAX:
            return self.n_experts
        return self.k


def init_gate(
    d_model: int,
    n_experts: int,
    rng: np.random.Generator,
    k: int = 1,
    kind: GateKind = GateKind.TOPK,
    noise: bool = False,
) -> GateConfig:
    """Gate with N(0, 1/d_model) weights; noise weights are drawn only when noise is on."""
    scale = d_model**-0.5
    gate_weights = rng.normal(0.0, scale, size=(d_model, n_experts))
    noise_weights = rng.normal(0.0, scale, size=(d_model, n_experts)) if noise else None
    kind = GateKind(kind)
    if kind is GateKind.SOFTMAX:
        k = n_experts
    elif kind is GateKind.SWITCH:
        k = 1
    return GateConfig(
        gate_weights=gate_weights,
        k=k,
        kind=kind,
        noise_weights=noise_weights,
        noise_enabled=noise,
    )


@dataclass(frozen=True)
class GateOutput:
    """Routing result for one input vector."""

    weights: np.ndarray
    selected: list[int]
    logits: np.ndarray


@dataclass(frozen=True)
class GateBatch:
    """Routing result for a batch; rows align with the input rows."""

    weights: np.ndarray
    selected: np.ndarray
    logits: np.ndarray
    kind: GateKind
    noise: Optional[np.ndarray] = None
    noise_logits: Optional[np.ndarray] = None
    mask: np.ndarray = field(init=False)

    def __post_init__(self):
        mask = np.zeros(self.weights.shape, dtype=bool)
        np.put_along_axis(mask, self.selected, True, axis=1)
        object.__setattr__(self, "mask", mask)

    def row(self, r: int) -> GateOutput:
        """GateOutput of a single row."""
        return GateOutput(
            weights=self.weights[r],
            selected=sorted(int(i) for i in self.selected[r]),
            logits=self.logits[r],
        )


def keep_top_k(v: np.ndarray, k: int) -> np.ndarray:
    """
    Keep the k largest entries of ``v`` and set the rest to -inf.

    Ties are broken towards the lower index.

    Raises:
        ValueError: Unless 1 <= k <= len(v).
    """
    v = np.asarray(v, dtype=np.float64)
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} outside [1, {v.size}]")
    out = np.full_like(v, -np.inf)
    top = np.argsort(-v, kind="stable")[:k]
    out[top] = v[top]
    return out


def _top_k_rows(h: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise keep_top_k; returns masked logits and the kept indices (B x k)."""
    top = np.argsort(-h, axis=1, kind="stable")[:, :k]
    masked = np.full_like(h, -np.inf)
    np.put_along_axis(masked, top, np.take_along_axis(h, top, axis=1), axis=1)
    return masked, top


def _check_input(x: np.ndarray, cfg: GateConfig) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != cfg.d_model:
        raise ShapeError(f"input has {x.shape[1]} features, gate expects {cfg.d_model}")
    return x


def noisy_topk_batch(
    x: np.ndarray,
    cfg: GateConfig,
    rng: Optional[np.random.Generator] = None,
    k: Optional[int] = None,
) -> GateBatch:
    """
    softmax(KeepTopK(H(x), k)) for every row of ``x``.

    H(x) = x W_g + nu * softplus(x W_noise) with nu ~ N(0, 1) when noise is
    enabled, else x W_g.
    """
    x = _check_input(x, cfg)
    k = cfg.k if k is None else k
    logits = x @ cfg.gate_weights
    noise = noise_logits = None
    if cfg.noise_enabled:
        if cfg.noise_weights is None:
            raise GateConfigError("noise_enabled requires noise_weights")
        if rng is None:
            raise GateConfigError("noisy gating needs a random generator")
        noise_logits = x @ cfg.noise_weights
        noise = rng.standard_normal(logits.shape)
        logits = logits + noise * np.logaddexp(0.0, noise_logits)
    masked, top = _top_k_rows(logits, k)
    weights = softmax(masked, axis=1)
    return GateBatch(
        weights=weights,
        selected=top,
        logits=logits,
        kind=GateKind.SOFTMAX if k == cfg.n_experts and not cfg.noise_enabled else GateKind.TOPK,
        noise=noise,
        noise_logits=noise_logits,
    )


def switch_batch(x: np.ndarray, cfg: GateConfig) -> GateBatch:
    """Top-1 routing; the kept weight is the winner's softmax probability."""
    x = _check_input(x, cfg)
    logits = x @ cfg.gate_weights
    probs = softmax(logits, axis=1)
    winner = np.argmax(probs, axis=1)[:, None]
    weights = np.zeros_like(probs)
    np.put_along_axis(weights, winner, np.take_along_axis(probs, winner, axis=1), axis=1)
    return GateBatch(weights=weights, selected=winner, logits=logits, kind=GateKind.SWITCH)


def route(
    x: np.ndarray,
    cfg: GateConfig,
    rng: Optional[np.random.Generator] = None,
) -> GateBatch:
    """Apply the routing rule named by ``cfg.kind`` to a batch."""
    if cfg.kind is GateKind.SWITCH:
        return switch_batch(x, cfg)
    if cfg.kind is GateKind.SOFTMAX:
        return noisy_topk_batch(x, cfg, rng, k=cfg.n_experts)
    return noisy_topk_batch(x, cfg, rng)


def noisy_topk_gate(
    x: np.ndarray,
    cfg: GateConfig,
    rng: Optional[np.random.Generator] = None,
) -> GateOutput:
    """Noisy top-k gate for a single input vector."""
    return noisy_topk_batch(np.asarray(x)[None, :], cfg, rng).row(0)


def softmax_gate(x: np.ndarray, cfg: GateConfig) -> GateOutput:
    """Dense softmax gate: every expert receives softmax(x W_g)."""
    return noisy_topk_batch(np.asarray(x)[None, :], cfg, k=cfg.n_experts).row(0)


def switch_gate(x: np.ndarray, cfg: GateConfig) -> GateOutput:
    """Switch (top-1) gate for a single input vector."""
    return switch_batch(np.asarray(x)[None, :], cfg).row(0)


def gate_backward(
    x: np.ndarray,
    cfg: GateConfig,
    batch: GateBatch,
    grad_weights: np.ndarray,
) -> tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """
    Back-propagate dL/d(gate weights) into the gate parameters and the input.

    Args:
        x: Batch the gate was evaluated on.
        cfg: Gate configuration used in the forward pass.
        batch: Forward routing result.
        grad_weights: dL/dweights, B x n (only selected entries matter).

    Returns:
        (dL/dW_g, dL/dW_noise or None, dL/dx).
    """
    x = _check_input(x, cfg)
    if batch.kind is GateKind.SWITCH:
        probs = softmax(batch.logits, axis=1)
        winner = batch.selected
        p_win = np.take_along_axis(probs, winner, axis=1)
        g_win = np.take_along_axis(grad_weights, winner, axis=1)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, winner, 1.0, axis=1)
        d_logits = g_win * p_win * (onehot - probs)
    else:
        w = batch.weights
        g = np.where(batch.mask, grad_weights, 0.0)
        d_logits = w * (g - np.sum(w * g, axis=1, keepdims=True))

    d_gate = x.T @ d_logits
    dx = d_logits @ cfg.gate_weights.T
    d_noise = None
    if batch.noise is not None and cfg.noise_weights is not None:
        d_noise_logits = d_logits * batch.noise * expit(batch.noise_logits)
        d_noise = x.T @ d_noise_logits
        dx = dx + d_noise_logits @ cfg.noise_weights.T
    return d_gate, d_noise, dx
