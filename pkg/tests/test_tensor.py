import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phyloadapt.tensor import (
    EmptyLossError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    finite_difference_check,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    softmax,
    swapaxes,
    take,
    tanh,
    tensor_mean,
    tensor_sum,
    transpose,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul ------------------------------------------------------------------------
def test_matmul_identity_and_selector():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    assert finite_difference_check(lambda: tensor_sum(matmul(a, b)), [a, b]) < 1e-4


def test_batched_matmul_gradient():
    rng = np.random.default_rng(5)
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    assert finite_difference_check(lambda: tensor_sum(mul(matmul(a, b), Tensor(w))), [a, b]) < 1e-4


# -- layer norm ----------------------------------------------------------------------
def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_normalised_row_passes_through():
    out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_dimension_error():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradient_and_mean(seed):
    rng = np.random.default_rng(seed)
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    w = rng.normal(size=(3, 6))
    assert finite_difference_check(lambda: tensor_sum(mul(layer_norm(x, g, b, eps=1e-5), Tensor(w))), [x, g, b]) < 1e-4
    const = layer_norm(x, Tensor(np.full(6, 2.5)), b)
    assert np.allclose(const.data.mean(axis=-1), b.data.mean(), atol=1e-9)


# -- softmax ------------------------------------------------------------------------
def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300 + 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    assert np.allclose(softmax(Tensor(x), axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_axis_validation():
    with pytest.raises(ValueError):
        softmax(Tensor(np.ones((2, 2))), axis=3)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    assert finite_difference_check(lambda: tensor_sum(mul(softmax(x, axis=-1), Tensor(w))), [x]) < 1e-4


# -- gelu ---------------------------------------------------------------------------
@pytest.mark.parametrize("mode", ["tanh", "none"])
def test_gelu_fixed_points(mode):
    assert gelu(Tensor([0.0]), mode).data[0] == 0.0
    assert abs(gelu(Tensor([10.0]), mode).data[0] - 10.0) < 1e-6


def test_gelu_exact_matches_definition():
    xs = np.linspace(-4, 4, 41)
    ref = [x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    assert np.allclose(gelu(Tensor(xs), "none").data, ref, atol=1e-14)
    # the tanh approximation stays within a few 1e-4 of the exact curve
    assert np.max(np.abs(gelu(Tensor(xs)).data - ref)) < 1e-3


def test_gelu_unknown_mode():
    with pytest.raises(ValueError):
        gelu(Tensor([1.0]), "sigmoid")


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("mode", ["tanh", "none"])
def test_gelu_gradient(seed, mode):
    x = param(np.random.default_rng(seed), 4, 3)
    assert finite_difference_check(lambda: tensor_sum(gelu(x, mode)), [x]) < 1e-4


# -- cross entropy ---------------------------------------------------------------------
def test_cross_entropy_examples():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))
    assert cross_entropy(Tensor([[20.0, -20.0]]), [0]).item() < 1e-15


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(EmptyLossError):
        cross_entropy(Tensor(np.zeros((2, 3))), [-100, -100])


def test_cross_entropy_ignore_rows_do_not_contribute():
    logits = Tensor(np.array([[1.0, 2.0, 0.5], [9.0, -9.0, 0.0]]))
    assert cross_entropy(logits, [1, -100]).item() == pytest.approx(cross_entropy(Tensor(logits.data[:1]), [1]).item())


def test_cross_entropy_target_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = param(rng, 4, 5)
    targets = rng.integers(0, 5, size=4)
    targets[1] = -100
    assert finite_difference_check(lambda: cross_entropy(logits, targets), [logits]) < 1e-4


# -- backward -----------------------------------------------------------------------
def test_backward_sum_gives_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(tensor_sum(w))
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_chain_rule_by_hand():
    w, x = Tensor(3.0, requires_grad=True), Tensor(2.0)
    y = mul(w, x)
    backward(mul(y, y))
    assert w.grad == pytest.approx(24.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_backward_accumulates_shared_inputs():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(tensor_sum(add(mul(w, w), w)))
    assert np.allclose(w.grad, 2 * w.data + 1)


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    a, b = param(rng, 5, 4), param(rng, 4, 3)

    def grads():
        backward(tensor_sum(tanh(matmul(a, b))))
        return a.grad.copy(), b.grad.copy()

    g1, g2 = grads(), grads()
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


def test_node_ids_are_topological():
    a = Tensor(np.ones(2), requires_grad=True)
    b = mul(a, a)
    c = add(b, a)
    assert a.id < b.id < c.id


@pytest.mark.parametrize("seed", range(5))
def test_shape_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 3, 4)
    idx = np.array([[0, 1], [1, 1]])
    y = param(rng, 2, 3, 4)
    w = rng.normal(size=(2, 4, 3))

    def f():
        z = swapaxes(add(x, y), 1, 2)
        z = add(z, transpose(reshape(x, (2, 3, 4)), (0, 2, 1)))
        out = tensor_sum(mul(z, Tensor(w)))
        out = add(out, tensor_sum(take(reshape(y, (6, 4)), idx)))
        out = add(out, tensor_mean(concat([x, y], axis=0)))
        return out

    assert finite_difference_check(f, [x, y]) < 1e-4


def test_linear_broadcasts_bias():
    rng = np.random.default_rng(0)
    x, w, b = param(rng, 2, 5, 3), param(rng, 3, 4), param(rng, 4)
    assert np.allclose(linear(x, w, b).data, x.data @ w.data + b.data)
    assert finite_difference_check(lambda: tensor_sum(tanh(linear(x, w, b))), [x, w, b]) < 1e-4


# -- finite-difference oracle ------------------------------------------------------------
def test_fd_check_quadratic():
    w = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    assert finite_difference_check(lambda: tensor_sum(mul(w, w)), [w]) < 1e-8


def test_fd_check_rejects_zero_step():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        finite_difference_check(lambda: tensor_sum(w), [w], step=0)


def test_fd_check_detects_a_wrong_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    # treating one factor of w*w as a constant halves the analytic gradient
    assert finite_difference_check(lambda: tensor_sum(mul(Tensor(w.data), w)), [w]) == pytest.approx(0.5, abs=1e-6)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_forward_results_stay_finite(x):
    t = Tensor(x)
    out = layer_norm(gelu(t), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(np.isfinite(softmax(out).data))
