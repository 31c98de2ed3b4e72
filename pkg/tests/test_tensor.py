import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from miniweave import tensor as T
from gradcheck import check

rng = np.random.default_rng(0)


def r(*shape):
    return rng.standard_normal(shape)


def naive_conv2d(x, w, stride, pad):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(cin):
                                acc += xp[b, i * stride + di, j * stride + dj, ci] * w[di, dj, ci, co]
                    out[b, i, j, co] = acc
    return out


def test_matmul_identity():
    a = r(2, 2)
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(a, dtype=np.float64))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_values():
    out = T.matmul(T.Tensor([[1, 2], [3, 4]]), T.Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_grad_is_ones_times_b_transpose():
    a = T.Tensor(r(3, 4), requires_grad=True)
    b = T.Tensor(r(4, 5))
    T.sum_(T.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(T.DimensionError):
        T.matmul(T.Tensor(r(2, 3)), T.Tensor(r(2, 3)))


@pytest.mark.parametrize(
    "x, want",
    [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]), ([0.0, math.log(3.0)], [0.25, 0.75])],
)
def test_softmax_cases(x, want):
    out = T.softmax(T.Tensor(np.array(x), dtype=np.float64))
    np.testing.assert_allclose(out.data, want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (3, 7), elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_stochastic(x):
    p = T.softmax(T.Tensor(x), axis=-1).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_conv_identity_kernel():
    x = r(2, 5, 5, 3).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0] = np.eye(3)
    np.testing.assert_array_equal(T.conv2d(T.Tensor(x), T.Tensor(w)).data, x)


def test_conv_ramp_against_loop():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    w = r(3, 3, 1, 2)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), padding=1).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, 1, 1), rtol=1e-12)


@pytest.mark.parametrize("stride, pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_random_against_loop(stride, pad):
    x, w = r(2, 5, 6, 3), r(3, 3, 3, 4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, stride, pad), rtol=1e-10)


def test_conv1d_frames_against_loop():
    x, w = r(5, 2, 3), r(3, 3, 4)
    got = T.conv1d_frames(T.Tensor(x), T.Tensor(w)).data
    want = np.zeros((5, 2, 4))
    for f in range(5):
        for j in range(3):
            src = f + j - 1
            if 0 <= src < 5:
                want[f] += x[src] @ w[j]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_group_norm_against_reference():
    x = r(2, 3, 3, 8)
    got = T.group_norm(T.Tensor(x), 4).data
    g = x.reshape(2, 9, 4, 2)
    want = ((g - g.mean(axis=(1, 3), keepdims=True)) / np.sqrt(g.var(axis=(1, 3), keepdims=True) + 1e-5)).reshape(x.shape)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_mse_self_zero_with_zero_grad():
    x = T.Tensor(r(3, 4), requires_grad=True)
    loss = T.mse(x, T.Tensor(x.data.copy()))
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(x.grad == 0)


def test_backward_requires_scalar():
    x = T.Tensor(r(3), requires_grad=True)
    with pytest.raises(T.ContractError):
        T.backward(T.mul(x, x))


def test_backward_accumulates_across_calls():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_shared_node_visited_once():
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    y = T.mul(x, x)
    T.sum_(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_leading_broadcast_violation():
    with pytest.raises(T.DimensionError):
        T.add(T.Tensor(r(3, 4)), T.Tensor(r(3, 1)))


def test_no_grad_builds_no_graph():
    x = T.Tensor(r(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_replay_is_bit_identical():
    x, w = r(1, 6, 6, 3).astype(np.float32), r(3, 3, 3, 4).astype(np.float32)

    def run():
        h = T.silu(T.conv2d(T.Tensor(x), T.Tensor(w), padding=1))
        return T.softmax(T.group_norm(h, 2), axis=-1).data

    np.testing.assert_array_equal(run(), run())


# -- finite-difference suite (64-bit) -------------------------------------

GRAD_CASES = {
    "add": (lambda a, b: T.add(a, b), [r(3, 4), r(4)]),
    "sub": (lambda a, b: T.sub(a, b), [r(2, 3), r(2, 3)]),
    "mul": (lambda a, b: T.mul(a, b), [r(2, 3), r(3)]),
    "div": (lambda a, b: T.div(a, b), [r(2, 3), 2.0 + np.abs(r(2, 3))]),
    "neg": (lambda a: T.neg(a), [r(4)]),
    "abs": (lambda a: T.abs_(a), [np.array([0.5, -1.2, 2.0, -0.3])]),
    "square": (lambda a: T.square(a), [r(5)]),
    "silu": (lambda a: T.silu(a), [r(2, 5)]),
    "scale": (lambda a: T.scale(a, -1.7), [r(3)]),
    "sum": (lambda a: T.sum_(a, axis=1), [r(3, 4)]),
    "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [r(2, 3, 4)]),
    "mse": (lambda a, b: T.mse(a, b), [r(3, 4), r(3, 4)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [r(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
    "slice": (lambda a: T.getitem(a, (slice(1, 3), slice(None, None, 2))), [r(4, 5)]),
    "take": (lambda a: T.take(a, [0, 0, 2, 1], axis=0), [r(3, 2)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=0), [r(2, 3), r(2, 3)]),
    "matmul": (lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [r(2, 2, 3, 4), r(2, 4, 3)]),
    "linear": (lambda x, w, b: T.linear(x, w, b), [r(2, 3, 4), r(5, 4), r(5)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [r(3, 5)]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, padding=1), [r(1, 4, 4, 2), r(3, 3, 2, 3), r(3)]),
    "conv2d_stride2": (lambda x, w: T.conv2d(x, w, stride=2, padding=1), [r(1, 4, 4, 2), r(3, 3, 2, 2)]),
    "conv1d_frames": (lambda x, w, b: T.conv1d_frames(x, w, b), [r(4, 2, 3), r(3, 3, 2), r(2)]),
    "group_norm": (lambda x, w, b: T.group_norm(x, 2, w, b), [r(2, 3, 2, 4), r(4), r(4)]),
    "upsample2x": (lambda x: T.upsample2x(x), [r(1, 2, 3, 2)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_finite_difference(name):
    fn, arrays = GRAD_CASES[name]
    check(fn, *arrays)
