"""Dense float64 tensor operations: reshaping, unfolding, contraction, SVD, norms.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
order. Every function returns a new array (or a view) and leaves its inputs
untouched.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mpoe.errors import NumericError, ShapeError

# Singular values below this fraction of sigma_max count as zero for rank
RANK_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Thin (optionally truncated) singular value decomposition of a matrix."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    discarded_energy: float

    @property
    def rank(self) -> int:
        """Numerical rank of the kept singular values."""
        if self.sigma.size == 0 or self.sigma[0] == 0.0:
            return 0
        return int(np.count_nonzero(self.sigma > RANK_TOLERANCE * self.sigma[0]))

    def product(self) -> np.ndarray:
        """u @ diag(sigma) @ vt."""
        return (self.u * self.sigma) @ self.vt


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Build a float64 row-major tensor.

    Args:
        data: Anything numpy can turn into an array (flat or nested).
        shape: Optional target extents for flat data.

    Returns:
        A C-contiguous float64 array.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = reshape(arr, shape)
    return arr


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    """
    Reinterpret the flat row-major data of ``t`` with new extents.

    Raises:
        ShapeError: If the element counts differ.
    """
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.reshape(t, new_shape, order="C")


def matricize(t: np.ndarray, split: int) -> np.ndarray:
    """
    Unfold ``t`` into a matrix whose rows are its first ``split`` indices.

    Raises:
        ShapeError: Unless 0 < split < t.ndim.
    """
    if not 0 < split < t.ndim:
        raise ShapeError(f"split {split} out of range for a {t.ndim}-order tensor")
    rows = math.prod(t.shape[:split])
    return reshape(t, (rows, t.size // rows))


def contract(
    a: np.ndarray,
    b: np.ndarray,
    axes_a: Sequence[int],
    axes_b: Sequence[int],
) -> np.ndarray:
    """
    Sum over paired axes of ``a`` and ``b``.

    The result carries the free axes of ``a`` followed by the free axes of ``b``.

    Raises:
        ShapeError: If the axis lists differ in length or paired extents differ.
    """
    axes_a, axes_b = list(axes_a), list(axes_b)
    if len(axes_a) != len(axes_b):
        raise ShapeError(f"axis lists differ in length: {axes_a} vs {axes_b}")
    for ax, bx in zip(axes_a, axes_b):
        if not (-a.ndim <= ax < a.ndim and -b.ndim <= bx < b.ndim):
            raise ShapeError(f"axis pair ({ax}, {bx}) out of range for {a.shape}, {b.shape}")
        if a.shape[ax] != b.shape[bx]:
            raise ShapeError(
                f"extent mismatch on axes ({ax}, {bx}): {a.shape[ax]} != {b.shape[bx]}"
            )
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def svd(m: np.ndarray, max_rank: Optional[int] = None) -> SvdResult:
    """
    Thin SVD with optional rank cap.

    Args:
        m: 2-order tensor with finite entries.
        max_rank: Keep at most this many singular triplets.

    Returns:
        SvdResult whose ``discarded_energy`` is the sum of squared dropped
        singular values.

    Raises:
        ShapeError: If ``m`` is not 2-order or ``max_rank`` < 1.
        NumericError: If ``m`` has NaN or infinite entries.
    """
    if m.ndim != 2:
        raise ShapeError(f"svd needs a 2-order tensor, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd input contains non-finite entries")
    if max_rank is not None and max_rank < 1:
        raise ShapeError(f"max_rank must be >= 1, got {max_rank}")

    u, sigma, vt = np.linalg.svd(m, full_matrices=False)
    keep = sigma.size if max_rank is None else min(max_rank, sigma.size)
    dropped = sigma[keep:]
    discarded = float(np.dot(dropped, dropped))
    return SvdResult(
        u=np.ascontiguousarray(u[:, :keep]),
        sigma=sigma[:keep].copy(),
        vt=np.ascontiguousarray(vt[:keep, :]),
        discarded_energy=discarded,
    )


def frobenius_norm(t: np.ndarray) -> float:
    """Square root of the sum of squared entries (same value for any reshape)."""
    flat = np.ravel(t, order="C")
    return float(np.sqrt(np.dot(flat, flat)))
