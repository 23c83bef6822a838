import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddtl.numerics import tensor as T
from ddtl.numerics.optim import NonFiniteGradient, OptimState, step
from ddtl.numerics.tensor import ShapeError
from ddtl import gradcheck

from oracles import conv2d_loops, dense_loops, maxpool2_loops, upsample2_loops


# ---------------------------------------------------------------- conv2d

def test_conv2d_hand_example():
    x = T.Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    k = T.Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert T.conv2d(x, k).data.tolist() == [[[5.0]]]


def test_conv2d_identity_kernel(rng):
    x = rng.uniform(-2, 2, (1, 5, 7))
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_input(rng):
    k = rng.uniform(-2, 2, (3, 2, 3, 3))
    out = T.conv2d(T.Tensor(np.zeros((2, 6, 6))), T.Tensor(k), padding=1)
    assert not out.data.any()


@pytest.mark.parametrize("padding,stride", [(0, 1), (1, 1), (1, 2), (2, 3), (0, 2)])
def test_conv2d_matches_loops(rng, padding, stride):
    x = rng.uniform(-2, 2, (3, 7, 6))
    k = rng.uniform(-2, 2, (4, 3, 3, 3))
    b = rng.uniform(-2, 2, 4)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), padding=padding, stride=stride)
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, b, padding, stride), rtol=0, atol=1e-12)


def test_conv2d_batch_equals_per_image(rng):
    x = rng.uniform(-2, 2, (3, 2, 6, 6))
    k = T.Tensor(rng.uniform(-2, 2, (4, 2, 3, 3)))
    batched = T.conv2d(T.Tensor(x), k, padding=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d_loops(x[i], k.data, None, 1, 1), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------- pooling / upsampling

def test_maxpool_examples():
    assert T.maxpool2(T.Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    ramp = np.arange(16.0).reshape(1, 4, 4)
    assert T.maxpool2(T.Tensor(ramp)).data.tolist() == [[[5.0, 7.0], [13.0, 15.0]]]
    const = np.full((2, 4, 6), 3.5)
    np.testing.assert_array_equal(T.maxpool2(T.Tensor(const)).data, np.full((2, 2, 3), 3.5))


def test_maxpool_matches_loops(rng):
    x = rng.uniform(-2, 2, (3, 8, 6))
    np.testing.assert_allclose(T.maxpool2(T.Tensor(x)).data, maxpool2_loops(x), atol=1e-12)


def test_maxpool_rejects_odd():
    with pytest.raises(ShapeError):
        T.maxpool2(T.Tensor(np.zeros((1, 3, 4))))


def test_maxpool_tie_goes_to_first_in_row_major():
    x = T.parameter(np.ones((1, 2, 2)))
    T.backward(T.tsum(T.maxpool2(x)))
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_upsample_examples():
    assert T.upsample2(T.Tensor([[[1.0]]])).data.tolist() == [[[1.0, 1.0], [1.0, 1.0]]]
    assert T.upsample2(T.Tensor([[[1.0, 2.0]]])).data.tolist() == [[[1, 1, 2, 2], [1, 1, 2, 2]]]


def test_upsample_matches_loops_and_inverts_pool(rng):
    x = rng.uniform(-2, 2, (2, 3, 5))
    up = T.upsample2(T.Tensor(x))
    np.testing.assert_array_equal(up.data, upsample2_loops(x))
    np.testing.assert_array_equal(T.maxpool2(up).data, x)


def test_upsample_backward_sums_block():
    x = T.parameter(np.zeros((1, 1, 1)))
    w = np.arange(4.0).reshape(1, 2, 2)
    T.backward(T.tsum(T.mul(T.upsample2(x), w)))
    assert x.grad.tolist() == [[[6.0]]]


# ---------------------------------------------------------------- dense / activations

def test_dense_examples(rng):
    x = rng.uniform(-2, 2, 4)
    out = T.dense(T.Tensor(x), T.Tensor(np.eye(4)), T.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)
    b = np.array([1.0, -2.0])
    out = T.dense(T.Tensor(x), T.Tensor(np.zeros((2, 4))), T.Tensor(b))
    np.testing.assert_array_equal(out.data, b)
    out = T.dense(T.Tensor([1.0, 2.0]), T.Tensor([[1.0, 1.0], [2.0, 0.0]]), T.Tensor([0.0, 1.0]))
    assert out.data.tolist() == [3.0, 3.0]


def test_dense_matches_loops(rng):
    x, wt, b = rng.uniform(-2, 2, 7), rng.uniform(-2, 2, (5, 7)), rng.uniform(-2, 2, 5)
    out = T.dense(T.Tensor(x), T.Tensor(wt), T.Tensor(b))
    np.testing.assert_allclose(out.data, dense_loops(x, wt, b), atol=1e-12)


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.dense(T.Tensor(np.zeros(3)), T.Tensor(np.zeros((2, 4))), T.Tensor(np.zeros(2)))


def test_activations():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5
    assert T.sigmoid(T.Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_ops_stay_finite_on_bounded_inputs(values):
    x = T.Tensor(values)
    for op in (T.sigmoid, T.relu, T.square):
        assert np.all(np.isfinite(op(x).data))
    assert np.isfinite(T.logsumexp(x).data).all()
    assert np.isfinite(T.softmax(x).data).all()


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    p = T.parameter([1.0, -3.0, 2.0])
    T.backward(T.tsum(p))
    assert p.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_power_rule():
    p = T.parameter([1.0, 2.0])
    T.backward(T.tsum(T.square(p)))
    assert p.grad.tolist() == [2.0, 4.0]


def test_backward_leaves_constants_untouched():
    p = T.parameter([1.0, 2.0])
    c = T.Tensor([3.0, 4.0])
    T.backward(T.tsum(T.mul(p, c)))
    assert c.grad is None
    assert p.grad.tolist() == [3.0, 4.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.mul(T.parameter([1.0, 2.0]), 2.0))


def test_backward_shared_subexpression():
    p = T.parameter([3.0])
    y = T.square(p)
    T.backward(T.tsum(T.add(y, T.mul(y, p))))  # p^2 + p^3
    assert p.grad.tolist() == [2 * 3 + 3 * 9]


@pytest.mark.parametrize("case", gradcheck.CASES, ids=lambda c: c.name)
def test_operator_gradients_match_finite_differences(case):
    fn, params = case.build(np.random.default_rng(99))
    assert gradcheck.check(fn, params, max_entries=case.max_entries) <= 1e-4


# ---------------------------------------------------------------- optimizer

def test_zero_gradient_leaves_params():
    p = T.parameter([1.0, -2.0])
    p.grad = np.zeros(2)
    state = step({"p": p}, OptimState())
    assert p.data.tolist() == [1.0, -2.0]
    assert state.t == 1


def test_plain_descent_step():
    p = T.parameter([0.5])
    p.grad = np.array([1.0])
    step({"p": p}, OptimState(lr=0.1, mode="sgd"))
    assert p.data[0] == pytest.approx(0.4, abs=1e-15)


def test_quadratic_bowl_descends():
    p = T.parameter([1.0])
    state = OptimState(lr=0.1)
    losses = []
    for _ in range(11):
        loss = T.tsum(T.square(p))
        losses.append(loss.item())
        p.grad = None
        T.backward(loss)
        step({"p": p}, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_finite_gradient_names_parameter():
    p = T.parameter([1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradient, match="'enc.w'"):
        step({"enc.w": p}, OptimState())
    assert p.data.tolist() == [1.0]


def test_optimizer_is_deterministic(rng):
    start = rng.uniform(-1, 1, 5)
    grads = [rng.uniform(-1, 1, 5) for _ in range(10)]

    def run():
        p = T.parameter(start.copy())
        s = OptimState(lr=0.01)
        for g in grads:
            p.grad = g
            step({"p": p}, s)
        return p.data

    assert run().tobytes() == run().tobytes()
