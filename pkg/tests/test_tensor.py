import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grwsmooth import tensor as tn
from grwsmooth.tensor import NonFiniteError, ShapeError, Tape, Tensor

seeds = st.integers(0, 2**32 - 1)


def grad_of(f, *values):
    tape = Tape()
    leaves = [tape.variable(v) for v in values]
    grads = tape.backward(f(*leaves))
    return [grads[l] for l in leaves]


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# ---------------------------------------------------------------- values


def test_elementwise_values():
    assert np.array_equal(tn.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    assert np.array_equal(tn.scale(Tensor([1.0, 2.0]), 0.0).data, [0.0, 0.0])
    assert np.array_equal(tn.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8.0, 15.0])
    assert np.array_equal(tn.sub(Tensor([2.0, 3.0]), Tensor(1.0)).data, [1.0, 2.0])


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        tn.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        # no implicit row broadcasting
        tn.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_matmul_identity_and_projector():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)
    P = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(tn.matmul(Tensor(P), Tensor(X)).data, [[1.0, 2.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-14)


def test_matmul_dim_mismatch():
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_reductions():
    assert tn.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert tn.mean(Tensor([2.0, 4.0])).item() == 3.0
    with pytest.raises(Exception):
        tn.sum(Tensor(np.ones((2, 2))), axis=2)


def test_max_tie_goes_to_lowest_index():
    (g,) = grad_of(lambda x: tn.max(x), np.array([1.0, 3.0, 3.0]))
    assert np.array_equal(g, [0.0, 1.0, 0.0])
    (g,) = grad_of(lambda x: tn.sum(tn.max(x, axis=1)), np.array([[2.0, 2.0], [0.0, 5.0]]))
    assert np.array_equal(g, [[1.0, 0.0], [0.0, 1.0]])


def test_log_sum_exp_values():
    assert tn.log_sum_exp(Tensor([0.7])).item() == 0.7
    assert tn.log_sum_exp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    big = tn.log_sum_exp(Tensor([1000.0, 1000.0])).item()
    assert big == pytest.approx(1000 + math.log(2), abs=1e-12)
    with pytest.raises(ShapeError):
        tn.log_sum_exp(Tensor(np.zeros((2, 0))), axis=1)


@given(seeds, st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_log_sum_exp_shift(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 5)) * 5
    base = tn.log_sum_exp(Tensor(x), axis=1).data
    shifted = tn.log_sum_exp(Tensor(x + c), axis=1).data - c
    np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- backward


def test_simple_derivatives():
    (g,) = grad_of(lambda x: tn.square(x), 3.0)
    assert g == 6.0
    # lse([x, 0]) at x = 0
    (g,) = grad_of(lambda x: tn.log_sum_exp(tn.broadcast_to(x, (2,)) * Tensor([1.0, 0.0])), 0.0)
    assert g == pytest.approx(0.5, abs=1e-15)


def test_fan_out_dag_sums_path_products():
    # x feeds a and b, a feeds c and d: root = x^2 e^x + x^2
    x0 = 0.7

    def f(x):
        a = tn.square(x)
        b = tn.exp(x)
        c = a * b
        d = c + a
        return d

    (g,) = grad_of(f, x0)
    expected = 2 * x0 * math.exp(x0) + x0 ** 2 * math.exp(x0) + 2 * x0
    assert g == pytest.approx(expected, rel=1e-14)


def test_backward_needs_scalar_root():
    tape = Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(x * 2.0)


def test_unused_leaf_gets_zero_grad():
    tape = Tape()
    x, y = tape.variable(np.ones(2)), tape.variable(np.ones(3))
    g = tape.backward(tn.sum(x))
    assert np.array_equal(g[y], np.zeros(3))


def test_non_finite_surfaces():
    with pytest.raises(NonFiniteError):
        tn.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        tn.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        Tape().variable([np.nan])


def test_constants_record_nothing():
    t = tn.add(Tensor([1.0]), Tensor([2.0]))
    assert t.tape is None


# ---------------------------------------------------------------- primitives vs finite differences


def _half(x, i):
    # operand i of a stacked pair, so binary ops see independent inputs
    return tn.reshape(tn.slice_axis(x, i, i + 1, axis=0), x.shape[1:])


def _weighted(op, shape, weights_seed=0):
    # positive weights keep gradient entries away from zero, where the
    # rounding floor of central differences swamps any relative comparison
    w = np.random.default_rng(weights_seed).uniform(0.5, 2.0, size=shape)
    return lambda x: tn.sum(op(x) * Tensor(w)) if w.ndim else op(x)


PRIMITIVES = {
    "add": (lambda x: tn.add(_half(x, 0), _half(x, 1)), (2, 3, 4), "normal"),
    "sub": (lambda x: tn.sub(_half(x, 0), _half(x, 1)), (2, 3, 4), "normal"),
    "mul": (lambda x: tn.mul(_half(x, 0), _half(x, 1)), (2, 3, 4), "normal"),
    "mul_scalar": (lambda x: tn.mul(tn.sum(_half(x, 0)), _half(x, 1)), (2, 3, 4), "normal"),
    "scale": (lambda x: tn.scale(x, -1.7), (3, 4), "normal"),
    "neg": (lambda x: tn.neg(x), (5,), "normal"),
    "square": (tn.square, (3, 4), "normal"),
    "power": (lambda x: tn.power(x, -0.5), (3, 4), "positive"),
    "exp": (tn.exp, (3, 4), "normal"),
    "log": (tn.log, (3, 4), "positive"),
    "tanh": (tn.tanh, (3, 4), "normal"),
    "relu": (tn.relu, (3, 4), "normal"),
    "matmul": (lambda x: tn.matmul(_half(x, 0), tn.transpose(_half(x, 1))), (2, 3, 4), "positive"),
    "batched_matmul": (lambda x: tn.matmul(x, tn.transpose(x, (0, 2, 1))), (2, 3, 4), "positive"),
    "sum_axis": (lambda x: tn.sum(x, axis=1), (3, 4), "normal"),
    "mean_axes": (lambda x: tn.mean(x, axis=(0, 2), keepdims=True), (2, 3, 4), "normal"),
    "max_axis": (lambda x: tn.max(x, axis=0), (3, 4), "separated"),
    "log_sum_exp": (lambda x: tn.log_sum_exp(x, axis=1), (3, 4), "normal"),
    "softmax": (lambda x: tn.softmax(x, axis=-1), (3, 4), "normal"),
    "reshape": (lambda x: tn.reshape(x, (4, 3)), (3, 4), "normal"),
    "transpose": (lambda x: tn.transpose(x), (3, 4), "normal"),
    "take": (lambda x: tn.take(x, [0, 2, 2], axis=1), (3, 4), "normal"),
    "slice_axis": (lambda x: tn.slice_axis(x, 1, 3, axis=0), (3, 4), "normal"),
    "broadcast_to": (lambda x: tn.broadcast_to(x, (2, 3, 4)), (3, 4), "normal"),
}


def _draw(kind, shape, rng):
    if kind == "positive":
        return rng.uniform(0.3, 3.0, size=shape)
    if kind == "separated":
        # distinct values at least 0.1 apart, so eps probes cannot flip an argmax
        n = int(np.prod(shape))
        return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)
    # random signs, magnitudes in [0.5, 2]: away from the relu kink and from zero
    return rng.choice((-1.0, 1.0), size=shape) * rng.uniform(0.5, 2.0, size=shape)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@given(seed=seeds)
@settings(max_examples=100, deadline=None)
def test_primitive_gradients(name, seed):
    op, shape, kind = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    x = _draw(kind, shape, rng)
    out_shape = op(Tensor(x)).shape
    f = _weighted(op, out_shape, seed % 1000)
    assert tn.grad_check(f, x) < 1e-6


# ---------------------------------------------------------------- grad_check harness


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_grad_check_half_norm(seed):
    rng = np.random.default_rng(seed)
    x = _draw("normal", 7, rng)
    assert tn.grad_check(lambda t: tn.scale(tn.sum(tn.square(t)), 0.5), x) < 1e-9


def test_grad_check_constant():
    x = np.ones(4)
    f = lambda t: Tensor(3.0)
    assert np.array_equal(tn.analytic_gradient(f, x), np.zeros(4))
    assert np.array_equal(tn.numeric_gradient(f, x), np.zeros(4))
    assert tn.grad_check(f, x) == 0.0


def test_numeric_gradient_rejects_non_finite_probe():
    with pytest.raises(NonFiniteError):
        tn.numeric_gradient(lambda t: Tensor(np.inf if t.data[0] > 0 else 0.0), np.array([0.0]))
