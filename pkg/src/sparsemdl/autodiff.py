"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every ``Value`` belongs to exactly one ``Tape``.  Operations append the
result node to the tape, so tape order is a topological order and
``Tape.backward`` is a single reverse sweep.

The module level helpers (``tanh``, ``relu``, ``exp`` ...) dispatch on their
argument: a ``Value`` is recorded on its tape, a plain array is evaluated
with numpy.  Model code written against the helpers therefore runs both
under differentiation and as a fast numpy-only forward pass.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the named operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _check_finite(op, data):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite result")
    return data


def _unbroadcast(grad, shape):
    # Sum a broadcast gradient back down to the operand's shape.
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


class Value:
    """A node on a tape: array data plus, after backward, its gradient."""

    __slots__ = ("data", "grad", "id", "tape", "parents", "backward_fn", "op")
    # make numpy defer ``ndarray op Value`` to our reflected methods
    __array_ufunc__ = None

    def __init__(self, tape, data, parents=(), backward_fn=None, op="leaf"):
        self.tape = tape
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape})"

    def _lift(self, other):
        if isinstance(other, Value):
            if other.tape is not self.tape:
                raise ValueError("values from different tapes cannot be combined")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        other = self._lift(other)
        _broadcast_shape("add", self.data, other.data)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return self.tape._record("add", _check_finite("add", a.data + b.data), (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        _broadcast_shape("sub", self.data, other.data)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

        return self.tape._record("sub", _check_finite("sub", a.data - b.data), (a, b), backward)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return self * -1.0

    def __mul__(self, other):
        other = self._lift(other)
        _broadcast_shape("mul", self.data, other.data)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return self.tape._record("mul", _check_finite("mul", a.data * b.data), (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division by a Value is not a supported primitive")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        other = self._lift(other)
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes = []

    def var(self, data):
        """Leaf node whose gradient is wanted."""
        return Value(self, np.array(data, dtype=np.float64))

    def const(self, data):
        arr = np.asarray(data, dtype=np.float64)
        return Value(self, arr, op="const")

    def _record(self, op, data, parents, backward_fn):
        return Value(self, data, parents, backward_fn, op)

    def backward(self, output):
        """Propagate d(output)/d(node) to every node on the tape.

        Returns a dict mapping node id to gradient array and also stores each
        gradient on ``node.grad``.  Nodes the output does not depend on get an
        exact zero gradient.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.data.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.data.shape}")
        grads = {output.id: np.ones_like(output.data)}
        for node in reversed(self.nodes[: output.id + 1]):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        out = {}
        for node in self.nodes:
            g = grads.get(node.id)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g
            out[node.id] = g
        return out


def backward(tape, output):
    return tape.backward(output)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return a.tape._record("matmul", _check_finite("matmul", a.data @ b.data), (a, b), backward)


def _unary(name, x, fwd, dfn):
    if not isinstance(x, Value):
        with np.errstate(all="ignore"):
            return fwd(np.asarray(x, dtype=np.float64))
    with np.errstate(all="ignore"):
        out_data = _check_finite(name, fwd(x.data))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * dfn(x.data, out_data),)

    return x.tape._record(name, out_data, (x,), backward)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda a, y: 1.0 - y * y)


def relu(x):
    return _unary("relu", x, lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(np.float64))


def exp(x):
    return _unary("exp", x, np.exp, lambda a, y: y)


def log(x):
    return _unary("log", x, np.log, lambda a, y: 1.0 / a)


def absolute(x):
    # np.sign(0) == 0: the subgradient at the kink is zero.
    return _unary("abs", x, np.abs, lambda a, y: np.sign(a))


def square(x):
    return _unary("square", x, np.square, lambda a, y: 2.0 * a)


def total(x):
    if not isinstance(x, Value):
        return np.sum(x)

    def backward(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return x.tape._record("sum", np.array(x.data.sum()), (x,), backward)


def mean(x):
    if not isinstance(x, Value):
        return np.mean(x)
    n = x.data.size

    def backward(g):
        return (np.full(x.data.shape, g / n),)

    return x.tape._record("mean", np.array(x.data.mean()), (x,), backward)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood (nats) of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    data = logits.data if isinstance(logits, Value) else np.asarray(logits, dtype=np.float64)
    if data.ndim != 2 or labels.shape != (data.shape[0],):
        raise ShapeError(f"softmax_xent: logits {data.shape} vs labels {labels.shape}")
    logp = _log_softmax(data)
    n = data.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    if not isinstance(logits, Value):
        return loss

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return logits.tape._record("softmax_xent", _check_finite("softmax_xent", np.array(loss)),
                               (logits,), backward)


def value_and_grad(fn, *arrays):
    """Evaluate scalar ``fn`` on fresh leaves for ``arrays``; return (value, grads).

    Each positional argument may be an array or a list of arrays; gradients
    come back with the same nesting.
    """
    tape = Tape()
    leaves = []
    for arr in arrays:
        if isinstance(arr, (list, tuple)):
            leaves.append([tape.var(a) for a in arr])
        else:
            leaves.append(tape.var(arr))
    out = fn(*leaves)
    tape.backward(out)
    grads = []
    for leaf in leaves:
        if isinstance(leaf, list):
            grads.append([v.grad for v in leaf])
        else:
            grads.append(leaf.grad)
    return float(out.data), grads


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
