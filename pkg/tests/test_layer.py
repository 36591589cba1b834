"""Tests for MPOE and dense expert banks."""

import numpy as np
import pytest

from mpoe.errors import ShapeError, StaleTraceError
from mpoe.gating import init_gate
from mpoe.layer import (
    DenseMoeBank,
    add_experts,
    backward,
    bank_param_counts,
    central_key,
    efficiency_ratio,
    expert_outputs,
    expert_weight,
    forward,
    init_from_dense,
    is_central_key,
)
from mpoe.models import FactorizationPlan, GateKind, WeightSlot
from mpoe.mpo import plan_factorization
from tests.conftest import make_bank, perturb


class TestInitFromDense:
    """Tests for init_from_dense."""

    def test_experts_start_identical(self, rng):
        """Every expert reconstructs the dense weights."""
        w1 = rng.standard_normal((6, 8))
        w2 = rng.standard_normal((8, 6))
        gate = init_gate(6, 3, rng)
        plan1, plan2 = plan_factorization(6, 8, 3), plan_factorization(8, 6, 3)
        bank = init_from_dense(w1, w2, plan1, plan2, 3, gate)
        for i in range(3):
            np.testing.assert_allclose(expert_weight(bank, WeightSlot.W1, i), w1, atol=1e-10)
            np.testing.assert_allclose(expert_weight(bank, "w2", i), w2, atol=1e-10)
        assert np.all(bank.biases[WeightSlot.W1] == 0.0)

    def test_auxiliaries_are_copies(self, small_bank):
        """Experts do not share auxiliary arrays."""
        a = small_bank.auxiliaries[WeightSlot.W1][0][0]
        b = small_bank.auxiliaries[WeightSlot.W1][1][0]
        assert a is not b
        np.testing.assert_array_equal(a, b)

    def test_single_tensor_plan_rejected(self, rng):
        """m=1 leaves nothing to share."""
        gate = init_gate(6, 2, rng)
        one = FactorizationPlan(row_factors=[6], col_factors=[8])
        with pytest.raises(ValueError):
            init_from_dense(np.zeros((6, 8)), np.zeros((8, 6)), one, one.transposed(), 2, gate)

    def test_plan_mismatch(self, rng):
        """Plans must factorize the given matrices."""
        gate = init_gate(6, 2, rng)
        with pytest.raises(ShapeError):
            init_from_dense(
                np.zeros((6, 8)),
                np.zeros((8, 6)),
                plan_factorization(6, 9, 3),
                plan_factorization(8, 6, 3),
                2,
                gate,
            )

    def test_expert_count_must_match_gate(self, rng):
        """n must equal the gate's number of experts."""
        gate = init_gate(6, 3, rng)
        with pytest.raises(ValueError):
            init_from_dense(
                np.zeros((6, 8)),
                np.zeros((8, 6)),
                plan_factorization(6, 8, 3),
                plan_factorization(8, 6, 3),
                2,
                gate,
            )

    def test_expert_index_range(self, small_bank):
        """Out-of-range experts raise IndexError."""
        with pytest.raises(IndexError):
            expert_weight(small_bank, WeightSlot.W1, 2)


class TestForward:
    """Tests for the forward pass."""

    def test_identical_experts_identical_outputs(self, small_bank, rng):
        """Freshly initialized experts produce bitwise equal outputs."""
        outputs = expert_outputs(small_bank, rng.standard_normal((10, 6)))
        np.testing.assert_array_equal(outputs[0], outputs[1])

    def test_matches_dense_bank(self, rng):
        """MPOE and dense banks with the same weights agree on 20 batches."""
        bank = perturb(make_bank(rng, n=3, k=2), rng)
        dense = DenseMoeBank.from_mpoe(bank)
        for _ in range(20):
            x = rng.standard_normal((16, 6))
            y, _ = forward(bank, x)
            y_dense, _ = forward(dense, x)
            np.testing.assert_allclose(y, y_dense, rtol=1e-8, atol=1e-12)

    def test_trace_records_routing(self, small_bank, rng):
        """The trace lists one expert per row under top-1 routing."""
        _, trace = forward(small_bank, rng.standard_normal((5, 6)))
        assert trace.batch_size == 5
        assert all(len(s) == 1 for s in trace.selected)
        assert trace.gate_values.shape == (5, 2)

    def test_input_shape(self, small_bank):
        """Inputs must be batch x d_model."""
        with pytest.raises(ShapeError):
            forward(small_bank, np.zeros((3, 5)))

    def test_non_finite_input(self, small_bank):
        """NaN inputs are rejected."""
        x = np.zeros((2, 6))
        x[0, 0] = np.nan
        with pytest.raises(ValueError):
            forward(small_bank, x)


def _numeric_param_grad(bank, name, loss, h=1e-5):
    params = bank.to_params()
    base = params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        up, down = loss(bank.with_params({name: plus})), loss(bank.with_params({name: minus}))
        grad[idx] = (up - down) / (2 * h)
    return grad


class TestBackward:
    """Analytic gradients against central finite differences."""

    @pytest.mark.parametrize(
        "k,kind,noise",
        [(2, GateKind.TOPK, False), (1, GateKind.TOPK, True), (1, GateKind.SWITCH, False)],
    )
    def test_finite_differences(self, rng, k, kind, noise):
        """Every parameter and the input match numeric gradients of sum(c * y)."""
        bank = perturb(
            make_bank(rng, d_model=6, d_ff=8, n=2, m=3, k=k, kind=kind, noise=noise), rng
        )
        x = rng.standard_normal((7, 6))
        c = rng.standard_normal((7, 6))

        def loss(b, inputs=x):
            y, _ = forward(b, inputs, np.random.default_rng(5))
            return float(np.sum(c * y))

        _, trace = forward(bank, x, np.random.default_rng(5))
        grads = backward(bank, x, c, trace)
        assert set(grads.params) == set(bank.to_params())
        for name in bank.to_params():
            np.testing.assert_allclose(
                grads.params[name],
                _numeric_param_grad(bank, name, loss),
                rtol=1e-5,
                atol=1e-7,
                err_msg=name,
            )

        numeric_x = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus, minus = x.copy(), x.copy()
            plus[idx] += 1e-5
            minus[idx] -= 1e-5
            numeric_x[idx] = (loss(bank, plus) - loss(bank, minus)) / 2e-5
        np.testing.assert_allclose(grads.x, numeric_x, rtol=1e-5, atol=1e-7)

    def test_dense_bank_gradients(self, rng):
        """Dense expert gradients match numeric gradients."""
        dense = DenseMoeBank.from_mpoe(perturb(make_bank(rng, k=2), rng))
        x = rng.standard_normal((5, 6))
        c = rng.standard_normal((5, 6))

        def loss(b):
            return float(np.sum(c * forward(b, x)[0]))

        grads = backward(dense, x, c, forward(dense, x)[1])
        np.testing.assert_allclose(
            grads.params["w1.dense"],
            _numeric_param_grad(dense, "w1.dense", loss),
            rtol=1e-5,
            atol=1e-7,
        )

    def test_unrouted_expert_gets_zero(self, rng):
        """Auxiliaries of an expert no row was routed to have zero gradient."""
        bank = make_bank(rng)
        bank = bank.with_params({"gate.weights": np.zeros((6, 2))})
        x = rng.standard_normal((4, 6))
        _, trace = forward(bank, x)
        grads = backward(bank, x, np.ones_like(x), trace)
        for name, g in grads.params.items():
            if ".aux.1." in name:
                assert np.all(g == 0.0)

    def test_skip_central(self, small_bank, rng):
        """include_central=False omits the central gradients only."""
        x = rng.standard_normal((4, 6))
        _, trace = forward(small_bank, x)
        full = backward(small_bank, x, np.ones_like(x), trace)
        partial = backward(small_bank, x, np.ones_like(x), trace, include_central=False)
        assert not any(is_central_key(n) for n in partial.params)
        for name, g in partial.params.items():
            np.testing.assert_allclose(g, full.params[name], rtol=1e-12, atol=1e-15)

    def test_stale_trace(self, small_bank, rng):
        """A trace from another bank is rejected."""
        x = rng.standard_normal((4, 6))
        _, trace = forward(small_bank, x)
        other = small_bank.with_params({})
        with pytest.raises(StaleTraceError):
            backward(other, x, np.ones_like(x), trace)

    def test_batch_size_mismatch(self, small_bank, rng):
        """A trace from a different batch size is rejected."""
        _, trace = forward(small_bank, rng.standard_normal((4, 6)))
        x = rng.standard_normal((3, 6))
        with pytest.raises(StaleTraceError):
            backward(small_bank, x, np.ones_like(x), trace)


class TestParameterAccounting:
    """Tests for efficiency_ratio and bank_param_counts."""

    def test_reference_ratio(self):
        """n=8, gamma=12 gives 20/104."""
        assert efficiency_ratio(8, 12) == pytest.approx(20 / 104, abs=1e-12)

    def test_invalid_arguments(self):
        """n and gamma must be positive."""
        with pytest.raises(ValueError):
            efficiency_ratio(0, 12)
        with pytest.raises(ValueError):
            efficiency_ratio(2, 0)

    @pytest.mark.parametrize("n", [2, 8, 16])
    def test_counts_match_ratio(self, rng, n):
        """total / dense_equivalent equals efficiency_ratio(n, gamma)."""
        counts = bank_param_counts(make_bank(rng, d_model=8, d_ff=12, n=n, m=3))
        assert counts.total == counts.shared + n * counts.per_expert
        assert counts.total / counts.dense_equivalent_total == pytest.approx(
            efficiency_ratio(n, counts.gamma), abs=1e-9
        )

    def test_bias_and_gate_counted_separately(self, small_bank):
        """Biases and the gate are reported outside the expert totals."""
        counts = bank_param_counts(small_bank)
        assert counts.bias_total == 2 * 8 + 2 * 6
        assert counts.gate_total == 6 * 2

    def test_dense_bank(self, small_bank):
        """A dense bank shares nothing."""
        counts = bank_param_counts(DenseMoeBank.from_mpoe(small_bank))
        assert counts.shared == 0
        assert counts.per_expert == 2 * 6 * 8
        assert counts.ratio == 1.0


class TestAddExperts:
    """Tests for growing a bank."""

    def test_new_experts_share_central(self, rng):
        """Added experts reuse the central tensors and copy the source expert."""
        bank = perturb(make_bank(rng, n=2), rng)
        grown = add_experts(bank, 2, source=1)
        assert grown.n_experts == 4
        assert grown.centrals[WeightSlot.W1] is bank.centrals[WeightSlot.W1]
        np.testing.assert_array_equal(
            expert_weight(grown, WeightSlot.W2, 3), expert_weight(bank, WeightSlot.W2, 1)
        )
        np.testing.assert_array_equal(grown.gate.gate_weights[:, 2], bank.gate.gate_weights[:, 1])

    def test_params_follow_new_n(self, rng):
        """Accounting uses the grown expert count."""
        bank = make_bank(rng, n=2)
        counts = bank_param_counts(add_experts(bank, 1))
        assert counts.n_experts == 3
        assert counts.shared == bank_param_counts(bank).shared

    def test_invalid_count(self, small_bank):
        """count must be positive."""
        with pytest.raises(ValueError):
            add_experts(small_bank, 0)


class TestParams:
    """Tests for the flat parameter view."""

    def test_round_trip(self, small_bank):
        """with_params(to_params()) rebuilds the same arrays."""
        rebuilt = small_bank.with_params(small_bank.to_params())
        for name, p in small_bank.to_params().items():
            assert rebuilt.to_params()[name] is p

    def test_new_identity(self, small_bank):
        """Every rebuilt bank gets a fresh uid."""
        assert small_bank.with_params({}).uid != small_bank.uid

    def test_central_keys(self, small_bank):
        """One central tensor per slot."""
        keys = [n for n in small_bank.to_params() if is_central_key(n)]
        assert keys == [central_key(WeightSlot.W1), central_key(WeightSlot.W2)]

    def test_gate_replaced(self, small_bank):
        """Gate weights can be replaced through with_params."""
        bank = small_bank.with_params({"gate.weights": np.ones((6, 2))})
        assert np.all(bank.gate.gate_weights == 1.0)


def _perturbed(bank, rng, prefix: str, scale: float = 0.1):
    """Copy of ``bank`` with noise added to every parameter whose name starts with ``prefix``."""
    return bank.with_params(
        {
            name: p + scale * rng.standard_normal(p.shape)
            for name, p in bank.to_params().items()
            if name.startswith(prefix)
        }
    )


class TestExpertIsolation:
    """Auxiliary tensors belong to one expert; the central tensor to all of them."""

    def test_aux_change_stays_in_its_expert(self, rng):
        """Moving expert 0's auxiliaries leaves the other experts bitwise unchanged."""
        bank = perturb(make_bank(rng, n=3), rng)
        moved = _perturbed(bank, rng, "w1.aux.0.")
        assert not np.allclose(
            expert_weight(moved, WeightSlot.W1, 0), expert_weight(bank, WeightSlot.W1, 0)
        )
        for i in (1, 2):
            np.testing.assert_array_equal(
                expert_weight(moved, WeightSlot.W1, i), expert_weight(bank, WeightSlot.W1, i)
            )
        for i in range(3):
            np.testing.assert_array_equal(
                expert_weight(moved, WeightSlot.W2, i), expert_weight(bank, WeightSlot.W2, i)
            )

    def test_central_change_reaches_every_expert(self, rng):
        """Moving the shared central tensor changes every expert's weight."""
        bank = perturb(make_bank(rng, n=3), rng)
        moved = _perturbed(bank, rng, central_key(WeightSlot.W1))
        for i in range(3):
            assert not np.allclose(
                expert_weight(moved, WeightSlot.W1, i), expert_weight(bank, WeightSlot.W1, i)
            )

    @pytest.mark.parametrize("expert", [0, 1])
    def test_forward_only_changes_routed_rows(self, rng, expert):
        """Rows routed away from an expert ignore its auxiliaries."""
        gate_weights = np.zeros((6, 2))
        gate_weights[0] = [1.0, -1.0]
        bank = perturb(make_bank(rng), rng).with_params({"gate.weights": gate_weights})
        x = rng.standard_normal((12, 6))
        x[:, 0] = np.where(np.arange(12) % 2 == 0, 1.0, -1.0)

        y, trace = forward(bank, x)
        routed = np.array([expert in s for s in trace.selected])
        assert routed.any() and not routed.all()

        moved = _perturbed(bank, rng, f"w1.aux.{expert}.")
        moved = _perturbed(moved, rng, f"w2.aux.{expert}.")
        y_moved, _ = forward(moved, x)
        np.testing.assert_array_equal(y_moved[~routed], y[~routed])
        assert not np.allclose(y_moved[routed], y[routed])
