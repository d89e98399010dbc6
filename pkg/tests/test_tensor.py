import math

import numpy as np
import pytest

from antispoof import tensor as T
from antispoof.nesblock import split_channels
from antispoof.tensor import NonFiniteError, ShapeError, Tensor, grad_check


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- conv1d


def test_conv_zero_input_gives_bias(rng):
    k = t(rng.normal(size=(3, 2, 3)))
    b = t([0.5, -1.0, 2.0])
    out = T.conv1d(t(np.zeros((2, 7))), k, b)
    assert np.array_equal(out.data, np.repeat(b.data[:, None], 7, axis=1))


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(4, 9))
    out = T.conv1d(t(x), t(np.eye(4)[:, :, None]), t(np.zeros(4)))
    assert np.array_equal(out.data, x)


def test_conv_hand_example():
    out = T.conv1d(t([[1.0, 2.0, 3.0]]), t([[[1.0, 1.0, 1.0]]]), t([0.0]))
    assert out.data.tolist() == [[3.0, 6.0, 5.0]]


def test_conv_dilation_hand_example():
    # taps at t-2, t, t+2 with zero padding
    out = T.conv1d(t([[1.0, 2.0, 3.0, 4.0, 5.0]]), t([[[1.0, 10.0, 100.0]]]), None, dilation=2)
    assert out.data.tolist() == [[310.0, 420.0, 531.0, 42.0, 53.0]]


def test_conv_linearity(rng):
    k = t(rng.normal(size=(3, 2, 5)))
    x, y = rng.normal(size=(2, 11)), rng.normal(size=(2, 11))
    a, b = 1.7, -0.3
    lhs = T.conv1d(t(a * x + b * y), k).data
    rhs = a * T.conv1d(t(x), k).data + b * T.conv1d(t(y), k).data
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_conv_batched_matches_per_item(rng):
    k, b = t(rng.normal(size=(3, 2, 3))), t(rng.normal(size=3))
    x = rng.normal(size=(4, 2, 6))
    batched = T.conv1d(t(x), k, b, dilation=2).data
    for i in range(4):
        assert np.allclose(batched[i], T.conv1d(t(x[i]), k, b, dilation=2).data, atol=1e-12)


@pytest.mark.parametrize("shape,kernel", [((3, 5), (2, 2, 3)), ((2, 5), (2, 2, 4))])
def test_conv_shape_errors(shape, kernel):
    with pytest.raises(ShapeError):
        T.conv1d(t(np.zeros(shape)), t(np.zeros(kernel)))


# ---------------------------------------------------------------- matmul, softmax, misc


def test_matmul_examples(rng):
    a = rng.normal(size=(3, 3))
    assert np.array_equal(T.matmul(t(a), t(np.eye(3))).data, a)
    assert T.matmul(t([[1, 2], [3, 4]]), t([[1], [1]])).data.tolist() == [[3.0], [7.0]]
    assert not T.matmul(t(np.zeros((2, 3))), t(rng.normal(size=(3, 4)))).data.any()
    with pytest.raises(ShapeError):
        T.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


def test_softmax_examples():
    assert np.allclose(T.softmax(t([2.0, 2.0, 2.0])).data, 1 / 3, atol=1e-15)
    assert np.allclose(T.softmax(t([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    big = T.softmax(t([1e4, 0.0, -3.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0


def test_softmax_invariants(rng):
    for _ in range(50):
        x = rng.normal(scale=5, size=(4, 7))
        for axis in (0, 1):
            s = T.softmax(t(x), axis=axis).data
            assert np.all(s > 0)
            assert np.max(np.abs(s.sum(axis=axis) - 1)) <= 1e-12
            shifted = T.softmax(t(x + rng.normal() * 10), axis=axis).data
            assert np.allclose(s, shifted, atol=1e-12)


def test_scalar_examples():
    assert T.sigmoid(t(0.0)).data == 0.5
    assert np.array_equal(T.global_avg_pool_time(t(np.full((3, 8), 2.5))).data, [2.5, 2.5, 2.5])
    for label in (0, 1):
        assert abs(float(T.cross_entropy(t([0.3, 0.3]), label).data) - math.log(2)) < 1e-15
    assert np.array_equal(T.relu(t([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_sigmoid_extremes_finite():
    s = T.sigmoid(t([-800.0, 800.0])).data
    assert s.tolist() == [0.0, 1.0]


def test_split_concat_inverse(rng):
    for C, J in [(16, 8), (12, 3), (5, 1), (4, 4)]:
        x = rng.normal(size=(C, 6))
        parts = split_channels(t(x), J)
        assert all(p.shape == (C // J, 6) for p in parts)
        assert np.array_equal(T.concat_channels(parts).data, x)


def test_cross_entropy_batch_mean(rng):
    z = rng.normal(size=(5, 3))
    y = np.array([0, 2, 1, 1, 0])
    expected = -np.mean(T.log_softmax_np(z)[np.arange(5), y])
    assert abs(float(T.cross_entropy(t(z), y).data) - expected) < 1e-14


# ---------------------------------------------------------------- tape mechanics


def test_backward_accumulates_shared_node():
    x = t([3.0], grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x
    y.backward()
    assert x.grad.tolist() == [7.0]


def test_no_grad_disables_tape():
    x = t([1.0, 2.0], grad=True)
    with T.no_grad():
        y = T.reduce_sum(T.square(x))
    assert not y.requires_grad


def test_nan_fails_fast_with_op_name():
    with pytest.raises(NonFiniteError, match="log1p"):
        T.log1p(t([-2.0]))
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(t([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_broadcast_gradient_reduces_to_operand_shape(rng):
    a = t(rng.normal(size=(3, 4)), grad=True)
    b = t(rng.normal(size=(4,)), grad=True)
    T.reduce_sum(T.mul(a, b)).backward()
    assert b.grad.shape == (4,)
    assert np.allclose(b.grad, a.data.sum(axis=0))


# ---------------------------------------------------------------- gradient checks


def test_grad_check_exact_quadratic(rng):
    x = t(rng.normal(size=(3, 4)))
    assert grad_check(lambda v: T.reduce_sum(T.square(v)), x, eps=1e-5) < 1e-6


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda v: T.reduce_sum(v), t([1.0]), eps=1e-3)


def test_grad_check_nonfinite_output():
    with pytest.raises(NonFiniteError):
        grad_check(lambda v: T.mul(T.exp(T.mul(v, 1000.0)), 1.0), t([1.0]), eps=1e-5)


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        return T._result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # missing factor 2

    assert grad_check(lambda v: T.reduce_sum(bad_square(v)), t([1.0, 2.0]), eps=1e-5) > 0.4


def test_grad_check_softmax_head(rng):
    w = t(rng.normal(size=(3, 5)))
    y = np.array([2, 0])
    x = t(rng.normal(size=(2, 5)))
    assert grad_check(lambda v: T.cross_entropy(T.linear(v, w), y), x, eps=1e-5) < 1e-4


def _op_cases(rng):
    """(name, function of one tensor, input array) for every differentiable op."""
    k = t(rng.normal(size=(3, 2, 3)))
    w = t(rng.normal(size=(4, 5)))
    other = t(rng.normal(size=(3, 5)))
    bias = t(rng.normal(size=4))
    pos = rng.uniform(0.5, 2.0, size=(3, 5))
    away_from_zero = rng.choice([-1, 1], size=(3, 5)) * rng.uniform(0.1, 2.0, size=(3, 5))
    return [
        ("add", lambda v: T.add(v, other), rng.normal(size=(3, 5))),
        ("sub", lambda v: T.sub(other, v), rng.normal(size=(3, 5))),
        ("mul", lambda v: T.mul(v, other), rng.normal(size=(3, 5))),
        ("mul_bcast", lambda v: T.mul(other, v), rng.normal(size=(5,))),
        ("relu", T.relu, away_from_zero),
        ("sigmoid", T.sigmoid, rng.normal(size=(3, 5))),
        ("exp", T.exp, rng.normal(size=(3, 5))),
        ("log1p", T.log1p, pos),
        ("square", T.square, rng.normal(size=(3, 5))),
        ("sum_axis", lambda v: T.reduce_sum(v, axis=0), rng.normal(size=(3, 5))),
        ("mean", lambda v: T.mean(v, axis=-1, keepdims=True), rng.normal(size=(3, 5))),
        ("avgpool", T.global_avg_pool_time, rng.normal(size=(3, 5))),
        ("reshape", lambda v: T.reshape(v, (5, 3)), rng.normal(size=(3, 5))),
        ("transpose", T.transpose, rng.normal(size=(3, 5))),
        ("slice", lambda v: T.slice_axis(v, 1, 3, axis=-2), rng.normal(size=(3, 5))),
        ("concat", lambda v: T.concat([v, other, v], axis=-1), rng.normal(size=(3, 5))),
        ("matmul", lambda v: T.matmul(v, w), rng.normal(size=(3, 4))),
        ("linear", lambda v: T.linear(v, w, bias), rng.normal(size=(3, 5))),
        ("conv1d_x", lambda v: T.conv1d(v, k, t([0.1, 0.2, 0.3]), dilation=2), rng.normal(size=(2, 6))),
        ("conv1d_k", lambda v: T.conv1d(t(np.arange(12.0).reshape(2, 6) / 6), v), rng.normal(size=(3, 2, 3))),
        ("softmax", lambda v: T.softmax(v, axis=0), rng.normal(size=(3, 5))),
        ("cross_entropy", lambda v: T.cross_entropy(v, np.array([0, 4, 2])), rng.normal(size=(3, 5))),
    ]


def test_every_op_gradient_100_trials():
    """Each op's reverse-mode gradient matches central differences (100 seeded trials)."""
    rng = np.random.default_rng(2024)
    worst = {}
    for _ in range(100):
        for name, fn, x in _op_cases(rng):
            probe = t(rng.normal(size=fn(t(x)).shape))

            def loss(v, fn=fn, probe=probe):
                return T.reduce_sum(T.mul(fn(v), probe))

            worst[name] = max(worst.get(name, 0.0), grad_check(loss, t(x), eps=1e-6))
    assert max(worst.values()) < 1e-4, worst
