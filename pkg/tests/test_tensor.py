"""Tensor engine: forward golden values, gradient checks, broadcasting laws."""

import math

import numpy as np
import pytest

from reasoncd import tensor as T
from reasoncd.tensor import Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float32), track_grad=True)


# ---------------------------------------------------------------------------
# forward golden values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.arange(9, dtype=np.float32).reshape(3, 3)
    out = T.matmul(Tensor(a), Tensor(np.eye(3, dtype=np.float32)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_case():
    a = Tensor(np.array([[1., 2.], [3., 4.]], dtype=np.float32))
    b = Tensor(np.array([[5., 6.], [7., 8.]], dtype=np.float32))
    np.testing.assert_array_equal(
        T.matmul(a, b).data, np.array([[19., 22.], [43., 50.]], dtype=np.float32))


def test_matmul_shape_mismatch_raises():
    with pytest.raises(T.DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_sigmoid_zero_is_half():
    assert T.sigmoid(Tensor(np.float32(0.0))).item() == 0.5


def test_gelu_golden_value():
    # x * Phi(x) at x=1 with the exact erf form
    got = T.gelu(Tensor(np.float32(1.0))).item()
    assert abs(got - 0.8413447) < 1e-6


def test_silu_golden_value():
    got = T.silu(Tensor(np.float32(1.0))).item()
    assert abs(got - 1.0 / (1.0 + math.exp(-1.0))) < 1e-6


def test_softmax_rows_sum_to_one_and_symmetry():
    x = Tensor(np.array([[1.0, 1.0, 1.0], [2.0, 0.0, 2.0]], dtype=np.float32))
    y = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(y[0], [1 / 3] * 3, atol=1e-6)
    assert y[1][0] == y[1][2]


def test_softmax_neg_inf_gets_zero_weight():
    x = Tensor(np.array([0.0, -np.inf, 0.0], dtype=np.float32))
    y = T.softmax(x, axis=-1).data
    assert y[1] == 0.0
    np.testing.assert_allclose(y[[0, 2]], 0.5, atol=1e-7)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 7)).astype(np.float32)
    a = T.log_softmax(Tensor(x)).data
    b = np.log(T.softmax(Tensor(x)).data)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_domain_errors():
    with pytest.raises(T.DomainError):
        T.log(Tensor(np.array([1.0, 0.0], dtype=np.float32)))
    with pytest.raises(T.DomainError):
        T.div(Tensor(np.float32(1.0)), Tensor(np.float32(0.0)))
    with pytest.raises(T.DomainError):
        T.sqrt(Tensor(np.float32(-1.0)))


def test_float32_preserved_through_ops():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    for op in (lambda t: T.add(t, t), lambda t: T.matmul(t, t), T.exp,
               T.sigmoid, T.gelu, lambda t: T.softmax(t, -1),
               lambda t: T.sum_(t), lambda t: T.mean_(t, axis=0)):
        assert op(x).dtype == np.float32


def test_forward_determinism():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 8)).astype(np.float32)
    w = rng.standard_normal((8, 8)).astype(np.float32)

    def run():
        return T.softmax(T.matmul(T.gelu(Tensor(x)), Tensor(w)), -1).data

    a, b = run(), run()
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward: hand-checked cases
# ---------------------------------------------------------------------------

def test_add_mul_grads():
    a, b = leaf([2.0]), leaf([3.0])
    loss = T.sum_(T.mul(T.add(a, b), b))  # (a+b)*b -> d/da = b, d/db = a+2b
    T.backward(loss)
    assert a.grad[0] == 3.0
    assert b.grad[0] == 8.0


def test_matmul_grad_hand_case():
    a = leaf(np.array([[1., 2.], [3., 4.]]))
    b = leaf(np.array([[5., 6.], [7., 8.]]))
    T.backward(T.sum_(T.matmul(a, b)))
    np.testing.assert_array_equal(a.grad, np.array([[11., 15.], [11., 15.]], dtype=np.float32))
    np.testing.assert_array_equal(b.grad, np.array([[4., 4.], [6., 6.]], dtype=np.float32))


def test_broadcast_add_reduces_grad():
    a = leaf(np.zeros((3, 4)))
    b = leaf(np.zeros(4))
    T.backward(T.sum_(T.add(a, b)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0, dtype=np.float32))


def test_grad_accumulates_across_backwards():
    a = leaf([1.0])
    T.backward(T.sum_(T.mul(a, 2.0)))
    T.backward(T.sum_(T.mul(a, 3.0)))
    assert a.grad[0] == 5.0


def test_same_tensor_used_twice():
    a = leaf([3.0])
    T.backward(T.sum_(T.mul(a, a)))
    assert a.grad[0] == 6.0


def test_backward_requires_scalar():
    a = leaf(np.ones(3))
    with pytest.raises(T.ContractError):
        T.backward(T.add(a, 1.0))


def test_backward_clears_tape():
    a = leaf([1.0])
    T.backward(T.sum_(T.exp(a)))
    assert len(T.active_tape()) == 0


def test_no_grad_suppresses_recording():
    a = leaf([1.0])
    with T.no_grad():
        out = T.mul(a, 2.0)
    assert len(T.active_tape()) == 0
    assert out.data[0] == 2.0


# ---------------------------------------------------------------------------
# broadcasting == explicit tiling
# ---------------------------------------------------------------------------

def test_broadcast_matches_tiling_property():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a = rng.standard_normal((5, 1, 4)).astype(np.float32)
        b = rng.standard_normal((1, 3, 4)).astype(np.float32)
        via_broadcast = T.mul(Tensor(a), Tensor(b)).data
        via_tiling = T.mul(Tensor(np.tile(a, (1, 3, 1))),
                           Tensor(np.tile(b, (5, 1, 1)))).data
        np.testing.assert_array_equal(via_broadcast, via_tiling)


# ---------------------------------------------------------------------------
# finite-difference checks
# ---------------------------------------------------------------------------

FD_TOL = 1e-3


def _check(f, shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32) * scale
    err = T.grad_check(f, Tensor(x), step=1e-3)
    assert err < FD_TOL, f"rel err {err:.2e} at seed {seed}"


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_composite(seed):
    w = np.random.default_rng(100 + seed).standard_normal((6, 6)).astype(np.float32)

    def f(x):
        h = T.gelu(T.matmul(x, Tensor(w)))
        return T.sum_(T.mul(T.softmax(h, -1), h))

    _check(f, (3, 6), seed)


@pytest.mark.parametrize("op", [
    T.exp, T.log_softmax, T.sigmoid, T.tanh, T.relu, T.gelu, T.silu,
])
def test_grad_check_pointwise(op):
    _check(lambda x: T.sum_(T.mul(op(x), op(x))), (4, 5), 3)


def test_grad_check_log_sqrt_div():
    def f(x):
        y = T.add(T.mul(x, x), 1.0)  # strictly positive
        return T.sum_(T.div(T.log(y), T.sqrt(y)))

    _check(f, (4, 4), 5)


def test_grad_check_reductions_and_shape_ops():
    def f(x):
        y = T.transpose(T.reshape(x, (2, 6)), (1, 0))
        return T.add(T.sum_(T.mean_(y, axis=0)), T.sum_(T.max_(y, axis=1)))

    _check(f, (3, 4), 2)


def test_grad_check_getitem_concat():
    def f(x):
        top = x[0:2]
        bot = x[2:]
        return T.sum_(T.mul(T.concat([bot, top], axis=0), x))

    _check(f, (4, 3), 9)


def test_grad_check_conv2d():
    w = np.random.default_rng(20).standard_normal((2, 3, 3, 3)).astype(np.float32) * 0.5

    def f(x):
        return T.sum_(T.gelu(T.conv2d(x, Tensor(w), stride=1, pad=1)))

    _check(f, (1, 3, 5, 5), 21, scale=0.5)


def test_grad_check_conv2d_weights():
    x = np.random.default_rng(22).standard_normal((2, 2, 6, 6)).astype(np.float32)

    def f(w):
        return T.sum_(T.tanh(T.conv2d(Tensor(x), w, stride=2, pad=0)))

    _check(f, (3, 2, 2, 2), 23, scale=0.5)


def test_grad_check_conv_transpose():
    w = np.random.default_rng(30).standard_normal((3, 2, 2, 2)).astype(np.float32)

    def f(x):
        return T.sum_(T.sigmoid(T.conv2d_transpose(x, Tensor(w), stride=2)))

    _check(f, (1, 3, 4, 4), 31)


def test_grad_check_bilinear_resize():
    def f(x):
        y = T.bilinear_resize(x, (7, 9))
        return T.sum_(T.mul(y, y))

    _check(f, (1, 2, 4, 5), 40)


def test_grad_check_embedding():
    ids = np.array([0, 2, 2, 1])

    def f(table):
        e = T.embedding(table, ids)
        return T.sum_(T.mul(e, e))

    _check(f, (4, 3), 50)


def test_grad_check_gather_rows():
    idx = np.array([1, 0, 2])

    def f(x):
        return T.sum_(T.exp(T.gather_rows(x, idx)))

    _check(f, (3, 4), 60)


def test_grad_check_rope():
    L, H, D = 5, 2, 8
    pos = np.arange(L, dtype=np.float64)
    inv = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    ang = pos[:, None] * inv[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]

    def f(x):
        y = T.rope_rotate(x, cos.astype(x.dtype), sin.astype(x.dtype))
        return T.sum_(T.mul(y, y))

    _check(f, (L, H, D), 70)


def test_rope_preserves_norm():
    rng = np.random.default_rng(71)
    x = rng.standard_normal((6, 2, 8)).astype(np.float32)
    ang = rng.uniform(0, 6.28, size=(6, 1, 4))
    y = T.rope_rotate(Tensor(x), np.cos(ang).astype(np.float32),
                      np.sin(ang).astype(np.float32)).data
    np.testing.assert_allclose(
        np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-5)


def test_grad_check_clip():
    def f(x):
        return T.sum_(T.mul(T.clip(x, -0.5, 0.5), x))

    # keep samples away from the clip knees where the derivative jumps
    rng = np.random.default_rng(80)
    x = rng.standard_normal((4, 4)).astype(np.float32)
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.2, x)
    err = T.grad_check(f, Tensor(x), step=1e-4)
    assert err < FD_TOL


def test_embedding_id_out_of_range():
    with pytest.raises(T.DimensionError):
        T.embedding(Tensor(np.zeros((3, 2), dtype=np.float32)), np.array([3]))
