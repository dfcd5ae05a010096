import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from intglab import tensor as T
from intglab.errors import ContractError, DegenerateRowError, DimensionError, NonFiniteError
from intglab.tensor import Tensor, backward, grad_check, no_grad

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_matmul_hand_example():
    a = Tensor([[1, 2], [3, 4]])
    b = Tensor([[5, 6], [7, 8]])
    np.testing.assert_array_equal((a @ b).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_softmax_closed_form():
    y = T.softmax_rows(Tensor([[0.0, np.log(2.0)]]))
    np.testing.assert_allclose(y.data, [[1 / 3, 2 / 3]], atol=1e-15)


def test_causal_softmax_upper_triangle_exact_zero(rng):
    y = T.softmax_rows(Tensor(rng.standard_normal((3, 6, 6)) * 10), causal=True).data
    assert (y[:, np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0.0).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


def test_masked_softmax_matches_causal_kernel(rng):
    x = rng.standard_normal((2, 5, 5))
    a = T.softmax_rows(Tensor(x), causal=True).data
    b = T.softmax_rows(Tensor(x), mask=np.tri(5, dtype=bool)).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        T.softmax_rows(Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False] * 3]))


def test_nonfinite_result_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_sum_of_squares_grad_check():
    assert grad_check(lambda x: (x * x).sum(), np.array([1.0, 2.0, 3.0])) <= 1e-9


def test_linear_loss_grads_match_differences(rng):
    x = rng.standard_normal((3, 3))
    w = rng.standard_normal((3, 3))
    assert grad_check(lambda t: (t @ Tensor(w)).sum(), x) <= 1e-6
    assert grad_check(lambda t: (Tensor(x) @ t).sum(), w) <= 1e-6


def test_leaf_grads_accumulate_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    backward((x * x).sum())
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])
    x.zero_grad()
    assert x.grad is None


def test_fan_out_doubles_gradient_exactly(rng):
    data = rng.standard_normal(5)
    x = Tensor(data, requires_grad=True)
    backward(T.silu(x).sum())
    single = x.grad.copy()
    x.zero_grad()
    g = T.silu(x)
    backward((g + g).sum())
    np.testing.assert_array_equal(x.grad, 2.0 * single)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert T.grad_enabled()


def test_abs_subgradient_is_zero_at_zero():
    x = Tensor([0.0, 2.0, -3.0], requires_grad=True)
    backward(T.tabs(x).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, -1.0])


def test_advanced_indexing_scatters_repeated_rows():
    w = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    backward(w[np.array([0, 0, 2])].sum())
    np.testing.assert_array_equal(w.grad, [[2, 2], [0, 0], [1, 1]])


@pytest.mark.parametrize("op", [
    lambda t: T.exp(t * 0.3).sum(),
    lambda t: T.log(T.exp(t) + 1.0).sum(),
    lambda t: T.silu(t).sum(),
    lambda t: (t * T.exp(-(t * t))).sum(),
    lambda t: (t.reshape((4, 3)).transpose() @ t.reshape((4, 3))).sum(),
    lambda t: T.mean(t * t, axis=0).sum(),
    lambda t: (T.softmax_rows(t.reshape((1, 2, 2, 3)).reshape((2, 6))[:, :2].reshape((2, 2)),
                              causal=True) * Tensor([[1.0, 2.0], [3.0, -4.0]])).sum(),
    lambda t: (T.softmax_rows(t, mask=np.array([True] * 5 + [False] * 7).reshape(3, 4) | np.eye(3, 4, dtype=bool))
               * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    lambda t: (t * Tensor([1.0, 2.0, 3.0, 4.0])).sum(),
    lambda t: (T.stack_sum([t, t * t]) - t).sum(),
    lambda t: T.swap_last(t.reshape((2, 2, 3))).reshape((12,))[np.array([0, 5, 5, 7])].sum(),
])
def test_operation_gradients(op, rng):
    x = rng.standard_normal((3, 4))
    assert grad_check(op, x) <= 1e-4


def test_broadcast_gradients_reduce_to_operand_shape(rng):
    b = rng.standard_normal(4)
    a = rng.standard_normal((3, 4))
    assert grad_check(lambda t: (Tensor(a) * t).sum(), b) <= 1e-6
    assert grad_check(lambda t: (t - Tensor(a)).mean(), b) <= 1e-6


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=finite))
def test_softmax_rows_are_distributions(x):
    y = T.softmax_rows(Tensor(x)).data
    assert ((y >= 0) & (y <= 1)).all()
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite),
       st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    a = T.softmax_rows(Tensor(x)).data
    b = T.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-5, 5)),
       st.floats(0.01, 3.0), st.floats(0.01, 3.0))
def test_entropy_decreases_with_temperature_scale(z, c1, c2):
    lo, hi = sorted((c1, c2))
    e_lo = _entropy(T.softmax_rows(Tensor(z * lo)).data)
    e_hi = _entropy(T.softmax_rows(Tensor(z * hi)).data)
    assert e_lo >= e_hi - 1e-12


@given(arrays(np.float64, st.tuples(st.integers(2, 4), st.integers(2, 4)), elements=st.floats(-3, 3)))
def test_random_composite_grad_check(x):
    def f(t):
        return (T.softmax_rows(t * t + 0.5 * t, causal=x.shape[0] == x.shape[1]) * Tensor(np.cos(x))).sum()

    assert grad_check(f, x) <= 1e-4
