"""Matrix product operator (tensor-train) decomposition of weight matrices.

A matrix W[I, J] with I = prod(i_k) and J = prod(j_k) is written as a chain of
4-order local tensors T_k[d_{k-1}, i_k, j_k, d_k] with d_0 = d_m = 1.

Index convention: W is first viewed as the 2m-order tensor
[i_1..i_m, j_1..j_m] and permuted to (i_1, j_1, i_2, j_2, ...). Each
sequential SVD then peels off one (i_k, j_k) pair with the working matrix rows
ordered (d_{k-1}, i_k, j_k). ``reconstruct`` undoes exactly this permutation.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mpoe.errors import DegenerateScaleError, NumericError, ShapeError
from mpoe.models import FactorizationPlan, NormalizeMode, ParamCount
from mpoe.tensor_core import contract, frobenius_norm, reshape, svd

logger = logging.getLogger(__name__)

# T5-base and GPT-2 feed-forward plans, keyed by (I, J, m)
KNOWN_PLANS: dict[tuple[int, int, int], tuple[tuple[int, ...], tuple[int, ...]]] = {
    (768, 3072, 5): ((3, 4, 4, 4, 4), (4, 4, 8, 6, 4)),
    (3072, 768, 5): ((4, 4, 8, 6, 4), (3, 4, 4, 4, 4)),
}


@dataclass(frozen=True)
class MpoFactors:
    """Ordered local tensors of one MPO decomposition."""

    locals: list[np.ndarray]
    truncation_eps: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.locals:
            raise ShapeError("an MPO needs at least one local tensor")
        for k, t in enumerate(self.locals):
            if t.ndim != 4:
                raise ShapeError(f"local tensor {k} is {t.ndim}-order, expected 4")
        if self.locals[0].shape[0] != 1 or self.locals[-1].shape[3] != 1:
            raise ShapeError("boundary bonds d_0 and d_m must be 1")
        for k in range(len(self.locals) - 1):
            left, right = self.locals[k].shape[3], self.locals[k + 1].shape[0]
            if left != right:
                raise ShapeError(
                    f"bond mismatch between tensors {k} and {k + 1}: {left} != {right}"
                )

    @property
    def m(self) -> int:
        """Number of local tensors."""
        return len(self.locals)

    @property
    def central_index(self) -> int:
        """0-based position of the central tensor."""
        return self.m // 2

    @property
    def bond_dims(self) -> list[int]:
        """[d_0, d_1, ..., d_m]."""
        return [self.locals[0].shape[0]] + [t.shape[3] for t in self.locals]

    @property
    def row_factors(self) -> list[int]:
        return [t.shape[1] for t in self.locals]

    @property
    def col_factors(self) -> list[int]:
        return [t.shape[2] for t in self.locals]

    @property
    def shape(self) -> tuple[int, int]:
        """(I, J) of the represented matrix."""
        return math.prod(self.row_factors), math.prod(self.col_factors)

    @property
    def central(self) -> np.ndarray:
        return self.locals[self.central_index]

    def auxiliaries(self) -> list[np.ndarray]:
        """All local tensors except the central one, in chain order."""
        c = self.central_index
        return [t for k, t in enumerate(self.locals) if k != c]

    @classmethod
    def assemble(
        cls,
        central: np.ndarray,
        auxiliaries: Sequence[np.ndarray],
    ) -> "MpoFactors":
        """Rebuild a chain from a central tensor and its m-1 auxiliaries."""
        m = len(auxiliaries) + 1
        c = m // 2
        chain = list(auxiliaries[:c]) + [central] + list(auxiliaries[c:])
        return cls(locals=chain)


def bond_dimensions(plan: FactorizationPlan) -> list[int]:
    """
    Maximal (untruncated) bond dimensions d_1..d_{m-1} of a plan.

    d_k = min(prod_{m'<=k} i_m' j_m', prod_{m'>k} i_m' j_m').
    """
    pairs = [i * j for i, j in zip(plan.row_factors, plan.col_factors)]
    dims = []
    for k in range(1, plan.m):
        dims.append(min(math.prod(pairs[:k]), math.prod(pairs[k:])))
    return dims


def _prime_factors(n: int) -> list[int]:
    """Prime factors of n in descending order (empty for n == 1)."""
    primes = []
    p = 2
    while p * p <= n:
        while n % p == 0:
            primes.append(p)
            n //= p
        p += 1
    if n > 1:
        primes.append(n)
    return sorted(primes, reverse=True)


def _middle_out(n: int, m: int) -> list[int]:
    """Split n into m factors, largest primes first, dealt from the middle outward."""
    center = m // 2
    order = sorted(range(m), key=lambda k: (abs(k - center), k))
    factors = [1] * m
    for idx, p in enumerate(_prime_factors(n)):
        factors[order[idx % m]] *= p
    return factors


def plan_factorization(rows: int, cols: int, m: int) -> FactorizationPlan:
    """
    Choose row/column factors for an I x J matrix and m local tensors.

    Shapes in ``KNOWN_PLANS`` get their fixed plan; otherwise the prime factors of each
    dimension are dealt round-robin starting at the central position, so the
    central factors are the largest. Missing factors are padded with 1.

    Args:
        rows: I.
        cols: J.
        m: Number of local tensors.

    Returns:
        FactorizationPlan without bond caps.
    """
    if m < 1 or rows < 1 or cols < 1:
        raise ValueError(f"need m, I, J >= 1, got m={m}, I={rows}, J={cols}")
    known = KNOWN_PLANS.get((rows, cols, m))
    if known is not None:
        return FactorizationPlan(row_factors=list(known[0]), col_factors=list(known[1]))
    return FactorizationPlan(
        row_factors=_middle_out(rows, m),
        col_factors=_middle_out(cols, m),
    )


def _interleave(w: np.ndarray, plan: FactorizationPlan) -> np.ndarray:
    """View W[I, J] as the 2m-order tensor ordered (i_1, j_1, ..., i_m, j_m)."""
    m = plan.m
    t = reshape(w, list(plan.row_factors) + list(plan.col_factors))
    perm = [axis for k in range(m) for axis in (k, m + k)]
    return np.transpose(t, perm)


def _deinterleave(t: np.ndarray, m: int) -> np.ndarray:
    """Inverse of ``_interleave``: (i_1, j_1, ...) back to an I x J matrix."""
    perm = list(range(0, 2 * m, 2)) + list(range(1, 2 * m, 2))
    t = np.transpose(t, perm)
    rows = math.prod(t.shape[:m])
    return reshape(np.ascontiguousarray(t), (rows, t.size // rows))


def decompose(w: np.ndarray, plan: FactorizationPlan) -> MpoFactors:
    """
    Sequential-SVD MPO decomposition.

    At step k the residual is reshaped to [d_{k-1} i_k j_k, -1], factored with
    an SVD capped at min(bond_dimensions[k], bond_caps[k]), U becomes T_k and
    diag(sigma) Vt is carried forward. The final residual is T_m.

    Args:
        w: I x J matrix.
        plan: Factorization plan for this matrix.

    Returns:
        MpoFactors with ``truncation_eps[k]`` the Frobenius norm discarded at
        step k.

    Raises:
        ShapeError: If the plan does not factorize ``w``.
        NumericError: If ``w`` has non-finite entries.
    """
    if w.ndim != 2:
        raise ShapeError(f"decompose needs a matrix, got shape {w.shape}")
    plan.check_matrix(*w.shape)
    if not np.all(np.isfinite(w)):
        raise NumericError("decompose input contains non-finite entries")

    m = plan.m
    max_bonds = bond_dimensions(plan)
    caps = plan.bond_caps or max_bonds

    residual = np.ascontiguousarray(_interleave(np.asarray(w, dtype=np.float64), plan))
    locals_: list[np.ndarray] = []
    eps: list[float] = []
    d_prev = 1
    for k in range(m - 1):
        i_k, j_k = plan.row_factors[k], plan.col_factors[k]
        rows = d_prev * i_k * j_k
        mat = reshape(residual, (rows, residual.size // rows))
        result = svd(mat, max_rank=min(max_bonds[k], caps[k]))
        d_k = result.sigma.size
        locals_.append(reshape(result.u, (d_prev, i_k, j_k, d_k)))
        eps.append(math.sqrt(result.discarded_energy))
        residual = result.sigma[:, None] * result.vt
        d_prev = d_k

    locals_.append(reshape(residual, (d_prev, plan.row_factors[-1], plan.col_factors[-1], 1)))
    factors = MpoFactors(locals=locals_, truncation_eps=eps)
    logger.debug(
        "decomposed %sx%s into %d tensors, bonds %s, eps %s",
        w.shape[0], w.shape[1], m, factors.bond_dims[1:-1], eps,
    )
    return factors


def _chain(f: MpoFactors) -> np.ndarray:
    """Contract the locals over their bonds into the (i_1, j_1, ..., i_m, j_m) tensor."""
    out = f.locals[0]
    for t in f.locals[1:]:
        out = contract(out, t, [out.ndim - 1], [0])
    # drop the boundary bonds of extent 1
    return out.reshape(out.shape[1:-1])


def reconstruct(f: MpoFactors) -> np.ndarray:
    """
    Multiply the local tensors back into the I x J matrix.

    Row index is (i_1..i_m), column index (j_1..j_m), matching ``decompose``.
    """
    return _deinterleave(_chain(f), f.m)


def truncation_bound(eps: Sequence[float]) -> float:
    """sqrt(sum eps_k^2): upper bound on the Frobenius reconstruction error."""
    if any(e < 0 for e in eps):
        raise ValueError(f"truncation errors must be >= 0, got {list(eps)}")
    return math.sqrt(math.fsum(e * e for e in eps))


def normalize(f: MpoFactors, mode: NormalizeMode = NormalizeMode.NONE) -> MpoFactors:
    """
    Redistribute scale across local tensors.

    ``none`` returns the factors unchanged. ``balance`` rescales every local so
    all have the geometric-mean norm; the product of the scales is 1 so the
    reconstructed matrix is unchanged.

    Raises:
        DegenerateScaleError: If a local tensor is all zeros under ``balance``.
    """
    mode = NormalizeMode(mode)
    if mode is NormalizeMode.NONE:
        return f

    norms = [frobenius_norm(t) for t in f.locals]
    if any(n == 0.0 for n in norms):
        raise DegenerateScaleError(f"cannot balance factors with a zero norm: {norms}")
    target = math.exp(math.fsum(math.log(n) for n in norms) / len(norms))
    scaled = [t * (target / n) for t, n in zip(f.locals, norms)]
    return MpoFactors(locals=scaled, truncation_eps=list(f.truncation_eps))


def count_params(f: MpoFactors) -> ParamCount:
    """Element counts of the central tensor and of all auxiliary tensors."""
    central = int(f.central.size)
    auxiliary = int(sum(t.size for t in f.auxiliaries()))
    gamma = central / auxiliary if auxiliary else math.inf
    return ParamCount(central=central, auxiliary=auxiliary, gamma=gamma)


def count_plan_params(plan: FactorizationPlan) -> ParamCount:
    """Element counts of a decomposition under ``plan`` without building it."""
    full = bond_dimensions(plan)
    caps = plan.bond_caps or full
    pairs = [i * j for i, j in zip(plan.row_factors, plan.col_factors)]
    bonds = [1]
    for k in range(plan.m - 1):
        bonds.append(min(full[k], caps[k], bonds[-1] * pairs[k]))
    bonds.append(1)
    sizes = [
        bonds[k] * i * j * bonds[k + 1]
        for k, (i, j) in enumerate(zip(plan.row_factors, plan.col_factors))
    ]
    central = sizes[plan.m // 2]
    auxiliary = sum(sizes) - central
    gamma = central / auxiliary if auxiliary else math.inf
    return ParamCount(central=central, auxiliary=auxiliary, gamma=gamma)


def local_gradients(
    f: MpoFactors,
    grad_w: np.ndarray,
    skip: Sequence[int] = (),
) -> list[Optional[np.ndarray]]:
    """
    Gradients of a loss with respect to each local tensor, given dL/dW.

    W is multilinear in its locals, so dL/dT_k is dL/dW (in interleaved
    layout) contracted with every other local tensor.

    Args:
        f: Factors the matrix W was built from.
        grad_w: dL/dW, same shape as W.
        skip: Positions whose gradient is not needed (returned as None).

    Returns:
        One array per position shaped like that local, or None if skipped.
    """
    m = f.m
    rows, cols = f.shape
    if grad_w.shape != (rows, cols):
        raise ShapeError(f"gradient shape {grad_w.shape} does not match W {rows}x{cols}")

    cores = [t.reshape(t.shape[0], t.shape[1] * t.shape[2], t.shape[3]) for t in f.locals]
    plan = FactorizationPlan(row_factors=f.row_factors, col_factors=f.col_factors)
    g = np.ascontiguousarray(_interleave(grad_w, plan)).reshape([c.shape[1] for c in cores])

    # left[k]: contraction of cores 0..k-1, shape [p_1..p_{k}, d_k]
    left = [np.ones(1)]
    for k in range(m - 1):
        left.append(contract(left[-1], cores[k], [left[-1].ndim - 1], [0]))
    # right[k]: contraction of cores k..m-1, shape [d_k, p_{k+1}..p_m]
    right: list[np.ndarray] = [np.ones(1)] * (m + 1)
    for k in range(m - 1, 0, -1):
        right[k] = contract(cores[k], right[k + 1], [2], [0])
    right[m] = np.ones(1)

    skip = set(skip)
    grads: list[Optional[np.ndarray]] = []
    for k in range(m):
        if k in skip:
            grads.append(None)
            continue
        # [p_1..p_k-1, d_{k-1}] x [p_1..p_m] -> [d_{k-1}, p_k..p_m]
        env = contract(left[k], g, list(range(k)), list(range(k)))
        n_right = m - k - 1
        env = contract(env, right[k + 1], list(range(2, 2 + n_right)), list(range(1, 1 + n_right)))
        grads.append(env.reshape(f.locals[k].shape))
    return grads
