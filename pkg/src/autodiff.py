"""
Minimal reverse-mode automatic differentiation over numpy arrays.

A GradientTape records every Node produced from watched parameters in
creation order, which is already a topological order, so the backward pass
is a single reversed sweep. Plain arrays mixed into an expression are
constants. The free functions (square, silu, total, average, value_of)
accept either a Node or an array, so objective code runs unchanged on
analytic predictors and on recorded networks.
"""
import numpy as np
from scipy.special import expit


class Node:
    __slots__ = ("value", "tape", "parents", "index")
    # Make numpy defer to our reflected operators instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, value, tape, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return _binary(self, other, np.add(_val(self), _val(other)),
                       lambda g: g, lambda g: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, _val(self) - _val(other),
                       lambda g: g, lambda g: -g)

    def __rsub__(self, other):
        return _binary(other, self, _val(other) - _val(self),
                       lambda g: g, lambda g: -g)

    def __mul__(self, other):
        a, b = _val(self), _val(other)
        return _binary(self, other, a * b, lambda g: g * b, lambda g: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = _val(self), _val(other)
        return _binary(self, other, a / b, lambda g: g / b, lambda g: -g * a / (b * b))

    def __rtruediv__(self, other):
        a, b = _val(other), _val(self)
        return _binary(other, self, a / b, lambda g: g / b, lambda g: -g * a / (b * b))

    def __neg__(self):
        return Node(-self.value, self.tape, ((self, lambda g: -g),))

    def __matmul__(self, other):
        a, b = _val(self), _val(other)
        return _binary(self, other, a @ b, lambda g: g @ b.T, lambda g: a.T @ g, broadcast=False)

    def __rmatmul__(self, other):
        a, b = _val(other), _val(self)
        return _binary(other, self, a @ b, lambda g: g @ b.T, lambda g: a.T @ g, broadcast=False)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, index={self.index})"


class GradientTape:
    def __init__(self):
        self._nodes = []

    def _record(self, node):
        self._nodes.append(node)
        return len(self._nodes) - 1

    def watch(self, value):
        return Node(np.array(value, dtype=np.float64), self)

    def gradient(self, target, sources):
        """d(target)/d(source) for each source; target must be a scalar Node on this tape."""
        if target.tape is not self:
            raise ValueError("target was not recorded on this tape")
        if target.value.size != 1:
            raise ValueError(f"gradient needs a scalar target, got shape {target.value.shape}")
        grads = [None] * len(self._nodes)
        grads[target.index] = np.ones_like(target.value)
        for node in reversed(self._nodes[: target.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(g)
                if grads[parent.index] is None:
                    grads[parent.index] = contribution
                else:
                    grads[parent.index] = grads[parent.index] + contribution
        return [
            np.zeros_like(src.value) if grads[src.index] is None else np.asarray(grads[src.index]).reshape(src.value.shape)
            for src in sources
        ]


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def value_of(x):
    return _val(x)


def _unbroadcast(grad, shape):
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(left, right, value, left_vjp, right_vjp, broadcast=True):
    tape = _tape_of(left, right)
    parents = []
    for operand, vjp in ((left, left_vjp), (right, right_vjp)):
        if isinstance(operand, Node):
            if broadcast:
                shape = operand.value.shape
                parents.append((operand, lambda g, vjp=vjp, shape=shape: _unbroadcast(vjp(g), shape)))
            else:
                parents.append((operand, vjp))
    return Node(value, tape, tuple(parents))


def _tape_of(*operands):
    tapes = {id(x.tape): x.tape for x in operands if isinstance(x, Node)}
    if len(tapes) != 1:
        raise ValueError("operands belong to different tapes")
    return next(iter(tapes.values()))


def square(x):
    if not isinstance(x, Node):
        return np.square(_val(x))
    v = x.value
    return Node(v * v, x.tape, ((x, lambda g: 2.0 * v * g),))


def silu(x):
    """x * sigmoid(x)."""
    if not isinstance(x, Node):
        v = _val(x)
        return v * expit(v)
    v = x.value
    s = expit(v)
    return Node(v * s, x.tape, ((x, lambda g: g * s * (1.0 + v * (1.0 - s))),))


def total(x, axis=None):
    if not isinstance(x, Node):
        return np.sum(_val(x), axis=axis)
    shape = x.value.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Node(np.sum(x.value, axis=axis), x.tape, ((x, vjp),))


def average(x, axis=None):
    size = _val(x).size if axis is None else _val(x).shape[axis]
    return total(x, axis=axis) * (1.0 / size)
