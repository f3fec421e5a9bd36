import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strassen_spn.autodiff import Tensor
from strassen_spn.errors import UsageError, ValidationError
from strassen_spn.quantize import (DegenerateQuantizationWarning, QuantState, TernaryMatrix, alpha_optimal,
                                   frobenius_objective, ste_gradient, ternarize, ternarize_fixed)


def test_ternarize_worked_example():
    # mean |W| = 0.5, delta = 0.35; survivors 0.9, -0.5, 1.0, -0.4 -> alpha = 0.7
    w = np.array([[0.9, -0.5], [0.0, 1.0], [0.2, -0.4]])
    t, delta, alpha = ternarize(w)
    assert delta == pytest.approx(0.35)
    np.testing.assert_array_equal(t.entries, [[1, -1], [0, 1], [0, -1]])
    assert alpha == pytest.approx(0.7)


def test_threshold_is_strict():
    w = np.array([0.7, -0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    # mean |W| = 0.07, delta = 0.049: both survive
    assert ternarize(w)[0].nnz == 2
    w = np.full(4, 0.5)
    # delta = 0.35 < 0.5 everywhere
    assert ternarize(w)[0].nnz == 4
    w = np.array([1.0, 0.0])  # delta = 0.35
    assert ternarize(w)[0].nnz == 1


def test_all_zero_weight_warns_and_alpha_zero():
    with pytest.warns(DegenerateQuantizationWarning):
        t, delta, alpha = ternarize(np.zeros((2, 2)))
    assert t.nnz == 0 and alpha == 0.0


def test_fixed_mode():
    t = ternarize_fixed(np.array([0.6, 0.5, -0.51, 0.1]))
    np.testing.assert_array_equal(t.entries, [1, 0, -1, 0])


def test_ternary_matrix_validation():
    with pytest.raises(ValidationError):
        TernaryMatrix(np.array([[2, 0]]))
    with pytest.raises(ValidationError):
        TernaryMatrix(np.array([[1, 0]]), scale=-1.0)
    t = TernaryMatrix(np.array([[1, -1, 0]]), scale=0.5)
    np.testing.assert_array_equal(t.dense(np.float64), [[0.5, -0.5, 0.0]])
    assert (t.rows, t.cols, t.nnz) == (1, 3, 2)


def test_alpha_optimal_requires_support():
    with pytest.raises(ValidationError):
        alpha_optimal(np.ones(3), TernaryMatrix(np.zeros(3, np.int8)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_adaptive_alpha_is_least_squares_optimal(w):
    if not np.any(np.abs(w) > 0.7 * np.abs(w).mean()):
        return
    t, _, alpha = ternarize(w)
    assert alpha == pytest.approx(alpha_optimal(w, t), rel=1e-12, abs=1e-12)
    best = frobenius_objective(w, t, alpha)
    for a in (alpha * 0.9, alpha * 1.1, alpha + 1e-3):
        assert frobenius_objective(w, t, a) >= best - 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5, allow_nan=False)))
def test_pattern_is_sign_of_survivors(w):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateQuantizationWarning)
        t, delta, _ = ternarize(w)
    np.testing.assert_array_equal(t.entries, np.sign(w) * (np.abs(w) > delta))


def test_quant_state_views():
    shadow = Tensor(np.array([[1.0, -0.2], [0.05, -3.0]]), requires_grad=True)
    q = QuantState(shadow)
    assert q.view() is shadow
    q.activate()
    v = q.view()
    assert v.op == "straight_through"
    np.testing.assert_allclose(v.data, [[2.0, 0.0], [0.0, -2.0]])
    v.backward(np.ones((2, 2)))
    np.testing.assert_array_equal(shadow.grad, np.ones((2, 2)))
    q.freeze()
    shadow.data[:] = 100.0  # frozen view ignores the shadow
    np.testing.assert_allclose(q.view().data, [[2.0, 0.0], [0.0, -2.0]])
    assert not q.view().requires_grad
    np.testing.assert_array_equal(ste_gradient(np.ones(2), q), np.zeros(2))


def test_freeze_requires_activation_and_ternary_requires_active():
    q = QuantState(Tensor(np.ones(3)))
    with pytest.raises(UsageError):
        q.freeze()
    with pytest.raises(UsageError):
        q.ternary()
    with pytest.raises(ValidationError):
        QuantState(Tensor(np.ones(3)), mode="nope")


def test_activation_changes_output_unless_already_ternary():
    q = QuantState(Tensor(np.array([0.3, -1.2, 2.0])))
    before = q.quantized_view().copy()
    q.activate()
    assert not np.allclose(q.quantized_view(), before)
    q2 = QuantState(Tensor(np.array([1.5, -1.5, 0.0, 1.5])))
    q2.activate()
    np.testing.assert_allclose(q2.quantized_view(), [1.5, -1.5, 0.0, 1.5])
