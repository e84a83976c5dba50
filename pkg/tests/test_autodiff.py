import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsemdl import autodiff as ad


def test_square_value_and_grad():
    tape = ad.Tape()
    x = tape.var(3.0)
    y = x * x
    assert float(y.data) == 9.0
    tape.backward(y)
    assert float(x.grad) == 6.0


def test_annihilator():
    tape = ad.Tape()
    x = tape.var(np.array([1.5, -2.0]))
    y = ad.total(x * 0.0)
    assert float(y.data) == 0.0
    tape.backward(y)
    assert np.all(x.grad == 0.0)


def test_drr_term_at_point_two():
    tape = ad.Tape()
    th = tape.var(0.2)
    y = 1.0 - ad.exp(ad.absolute(th) * -5.0)
    assert float(y.data) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    tape.backward(y)
    assert float(th.grad) == pytest.approx(5 * math.exp(-1), rel=1e-14)


def test_unused_parameter_gets_exact_zero():
    tape = ad.Tape()
    a, b = tape.var(2.0), tape.var(np.ones(3))
    grads = tape.backward(a * a)
    assert np.array_equal(grads[b.id], np.zeros(3))
    assert b.grad.shape == (3,)


def test_backward_requires_scalar():
    tape = ad.Tape()
    x = tape.var(np.ones(2))
    with pytest.raises(ad.ShapeError):
        tape.backward(x * 2.0)


def test_shape_error_names_operation():
    tape = ad.Tape()
    a, b = tape.var(np.ones((2, 3))), tape.var(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        a @ b
    with pytest.raises(ad.ShapeError, match="add"):
        tape.var(np.ones(3)) + tape.var(np.ones(4))


def test_non_finite_raises():
    tape = ad.Tape()
    with pytest.raises(ad.NonFiniteError):
        ad.exp(tape.var(1000.0))
    with pytest.raises(ad.NonFiniteError):
        ad.log(tape.var(0.0))


def test_abs_subgradient_zero_at_kink():
    tape = ad.Tape()
    x = tape.var(np.array([0.0, 2.0, -3.0]))
    tape.backward(ad.total(ad.absolute(x)))
    assert np.array_equal(x.grad, [0.0, 1.0, -1.0])


def test_relu_and_tanh_gradients():
    x0 = np.array([-1.0, 0.5, 2.0])
    _, (g,) = ad.value_and_grad(lambda x: ad.total(ad.relu(x)), x0)
    assert np.array_equal(g, [0.0, 1.0, 1.0])
    _, (g,) = ad.value_and_grad(lambda x: ad.total(ad.tanh(x)), x0)
    np.testing.assert_allclose(g, 1 - np.tanh(x0) ** 2, rtol=1e-14)


def test_mean_and_broadcast_bias():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)

    def f(W, b):
        return ad.mean(ad.square(X @ W + b))

    _, (gW, gb) = ad.value_and_grad(f, W, b)
    Z = X @ W + b
    np.testing.assert_allclose(gW, X.T @ (2 * Z / Z.size), rtol=1e-12)
    np.testing.assert_allclose(gb, (2 * Z / Z.size).sum(axis=0), rtol=1e-12)


def test_softmax_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    _, (g,) = ad.value_and_grad(lambda z: ad.softmax_cross_entropy(z, labels), logits)
    fd = ad.finite_diff_grad(lambda z: ad.softmax_cross_entropy(z, labels), logits)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_uniform_softmax_is_log_k():
    loss = ad.softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), rel=1e-14)


def test_division_by_value_is_rejected():
    tape = ad.Tape()
    x = tape.var(2.0)
    assert float((x / 4.0).data) == 0.5
    with pytest.raises(TypeError):
        x / x


def test_mixing_tapes_rejected():
    with pytest.raises(ValueError):
        ad.Tape().var(1.0) + ad.Tape().var(1.0)


def test_numpy_on_left_defers_to_value():
    tape = ad.Tape()
    w = tape.var(np.eye(2))
    out = np.ones((1, 2)) @ w + np.ones(2)
    assert isinstance(out, ad.Value)
    np.testing.assert_array_equal(out.data, [[2.0, 2.0]])


def test_finite_diff_quadratic_and_constant():
    g = ad.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)
    g = ad.finite_diff_grad(lambda x: 4.2, np.ones(5))
    assert np.all(np.abs(g) <= 1e-10)
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda x: 0.0, np.ones(1), h=0.0)
    with pytest.raises(ad.NonFiniteError):
        ad.finite_diff_grad(lambda x: float("nan"), np.ones(1))


def test_drr_penalty_gradient_vs_finite_differences():
    rng = np.random.default_rng(2)
    theta = rng.uniform(0.05, 2, size=20) * rng.choice([-1, 1], size=20)

    def f(t):
        return ad.total(1.0 - ad.exp(ad.absolute(t) * -5.0))

    _, (g,) = ad.value_and_grad(f, theta)
    fd = ad.finite_diff_grad(lambda t: f(t), theta)
    np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    X, W = rng.normal(size=(7, 4)), rng.normal(size=(4, 3))

    def f(W):
        return ad.total(ad.tanh(X @ W) * ad.tanh(X @ W))

    a = ad.value_and_grad(f, W)
    b = ad.value_and_grad(f, W)
    assert a[0] == b[0]
    assert np.array_equal(a[1][0], b[1][0])


def test_tape_is_topological():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    y = ad.total(ad.exp(x) * x + x)
    for node in tape.nodes:
        assert all(p.id < node.id for p in node.parents)
    tape.backward(y)
    for node in tape.nodes:
        assert node.grad.shape == node.data.shape


finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_linearity_of_sum_gradient(a, b):
    def f1(x):
        return ad.total(ad.square(x + b))

    def f2(x):
        return ad.total(ad.tanh(x) * 3.0)

    _, (g1,) = ad.value_and_grad(f1, a)
    _, (g2,) = ad.value_and_grad(f2, a)
    _, (g12,) = ad.value_and_grad(lambda x: f1(x) + f2(x), a)
    np.testing.assert_allclose(g12, g1 + g2, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_gradient_property(a, b):
    _, (ga, gb) = ad.value_and_grad(lambda x, y: ad.total(ad.tanh(x @ y)), a, b)
    fa = ad.finite_diff_grad(lambda x: np.tanh(x @ b).sum(), a)
    fb = ad.finite_diff_grad(lambda y: np.tanh(a @ y).sum(), b)
    np.testing.assert_allclose(ga, fa, atol=1e-7)
    np.testing.assert_allclose(gb, fb, atol=1e-7)
