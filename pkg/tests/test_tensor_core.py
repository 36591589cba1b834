"""Tests for dense tensor operations."""

import numpy as np
import pytest

from mpoe.errors import NumericError, ShapeError
from mpoe.tensor_core import as_tensor, contract, frobenius_norm, matricize, reshape, svd


class TestReshape:
    """Tests for reshape and matricize."""

    def test_row_major_order(self):
        """Flat data is reinterpreted in row-major order."""
        t = as_tensor(range(6), shape=(2, 3))
        assert t[1, 0] == 3.0
        assert reshape(t, (3, 2))[0, 1] == 1.0

    def test_element_count_mismatch(self):
        """Reshaping to a different element count raises ShapeError."""
        with pytest.raises(ShapeError):
            reshape(np.zeros(6), (4, 2))

    def test_matricize_split(self):
        """The first split indices become rows."""
        t = np.arange(24.0).reshape(2, 3, 4)
        assert matricize(t, 2).shape == (6, 4)
        assert matricize(t, 1).shape == (2, 12)

    def test_matricize_bad_split(self):
        """Split must leave at least one axis on each side."""
        with pytest.raises(ShapeError):
            matricize(np.zeros((2, 3)), 0)


class TestContract:
    """Tests for contract."""

    def test_matrix_product(self, rng):
        """Contracting axis 1 with axis 0 is a matrix product."""
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(contract(a, b, [1], [0]), a @ b, rtol=1e-12)

    def test_free_axes_order(self, rng):
        """Free axes of a come first, then free axes of b."""
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 3))
        assert contract(a, b, [1], [1]).shape == (2, 4, 5)

    def test_extent_mismatch(self):
        """Paired axes must have equal extents."""
        with pytest.raises(ShapeError):
            contract(np.zeros((2, 3)), np.zeros((4, 5)), [1], [0])

    def test_axis_list_lengths(self):
        """Axis lists must pair up."""
        with pytest.raises(ShapeError):
            contract(np.zeros((2, 3)), np.zeros((3, 2)), [1, 0], [0])


class TestSvd:
    """Tests for the truncated SVD."""

    def test_full_svd_reconstructs(self, rng):
        """Without a cap the product equals the input."""
        m = rng.standard_normal((7, 5))
        result = svd(m)
        np.testing.assert_allclose(result.product(), m, atol=1e-12)
        assert result.discarded_energy == 0.0

    def test_discarded_energy(self, rng):
        """Discarded energy is the squared norm of the dropped part."""
        m = rng.standard_normal((6, 6))
        result = svd(m, max_rank=2)
        assert result.sigma.size == 2
        residual = frobenius_norm(m - result.product()) ** 2
        assert result.discarded_energy == pytest.approx(residual, rel=1e-10)

    def test_cap_larger_than_rank(self, rng):
        """Caps above min(rows, cols) keep everything."""
        result = svd(rng.standard_normal((3, 8)), max_rank=100)
        assert result.sigma.size == 3

    def test_rank_of_outer_product(self, rng):
        """An outer product has numerical rank 1."""
        u, v = rng.standard_normal(5), rng.standard_normal(4)
        assert svd(np.outer(u, v)).rank == 1

    def test_zero_matrix_rank(self):
        """The zero matrix has rank 0."""
        assert svd(np.zeros((3, 3))).rank == 0

    def test_non_finite_rejected(self):
        """NaN input raises NumericError."""
        m = np.ones((2, 2))
        m[0, 1] = np.nan
        with pytest.raises(NumericError):
            svd(m)

    def test_not_a_matrix(self):
        """Only 2-order tensors are accepted."""
        with pytest.raises(ShapeError):
            svd(np.zeros((2, 2, 2)))

    def test_zero_cap_rejected(self):
        """max_rank must be at least 1."""
        with pytest.raises(ShapeError):
            svd(np.eye(3), max_rank=0)


class TestFrobeniusNorm:
    """Tests for frobenius_norm."""

    def test_known_value(self):
        """||[3, 4]|| = 5."""
        assert frobenius_norm(np.array([3.0, 4.0])) == 5.0

    def test_reshape_invariant(self, rng):
        """The norm does not depend on the tensor's shape."""
        t = rng.standard_normal((2, 3, 4))
        assert frobenius_norm(t) == pytest.approx(frobenius_norm(t.reshape(6, 4)), rel=1e-15)


def nested_loop_contract(a: np.ndarray, b: np.ndarray, ax: int, bx: int) -> np.ndarray:
    """Single-axis contraction written out element by element."""
    free_a = [s for k, s in enumerate(a.shape) if k != ax]
    free_b = [s for k, s in enumerate(b.shape) if k != bx]
    out = np.zeros(free_a + free_b)
    for ia in np.ndindex(*free_a):
        for ib in np.ndindex(*free_b):
            total = 0.0
            for s in range(a.shape[ax]):
                total += a[ia[:ax] + (s,) + ia[ax:]] * b[ib[:bx] + (s,) + ib[bx:]]
            out[ia + ib] = total
    return out


class TestContractAgainstLoops:
    """contract agrees with an explicit summation."""

    def test_neighbouring_local_tensors(self, rng):
        """Bond axis 3 of a [1,2,3,6] tensor against axis 0 of a [6,3,2,1] tensor."""
        a, b = rng.standard_normal((1, 2, 3, 6)), rng.standard_normal((6, 3, 2, 1))
        result = contract(a, b, [3], [0])
        assert result.shape == (1, 2, 3, 3, 2, 1)
        expected = nested_loop_contract(a, b, 3, 0)
        np.testing.assert_allclose(result, expected, rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize(
        "ax,bx,b_shape", [(0, 2, (3, 2, 4)), (1, 1, (3, 4, 2)), (2, 0, (4, 3, 2))]
    )
    def test_inner_axes(self, rng, ax, bx, b_shape):
        """Contracted axes in any position keep the free axes in order."""
        a, b = rng.standard_normal((4, 4, 4)), rng.standard_normal(b_shape)
        np.testing.assert_allclose(
            contract(a, b, [ax], [bx]), nested_loop_contract(a, b, ax, bx), rtol=1e-12, atol=1e-14
        )
