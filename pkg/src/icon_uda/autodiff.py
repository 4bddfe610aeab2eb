"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the operations the ICON losses need are provided. Every node keeps its
value, an accumulated gradient of the same shape, and the parents it was
computed from together with a closure that maps the node's gradient to
gradient contributions for those parents.

A batch of samples is represented as a matrix node whose rows are samples.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

PROB_EPS = 1e-7


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class EvaluationError(ArithmeticError):
    """A differentiated function produced a non-finite value."""


def _as_array(x) -> np.ndarray:
    return np.array(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out axes that numpy broadcasting introduced or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class DiffValue:
    """A node in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents: Sequence["DiffValue"] = (),
                 backward: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None,
                 name: str = ""):
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"DiffValue{label}(shape={self.value.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def detach(self) -> "DiffValue":
        return DiffValue(self.value.copy())

    def backward(self):
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node."""
        if self.value.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {self.shape}")
        Tape.from_root(self).backward(self)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = lift(other)
        a_shape, b_shape = self.shape, other.shape
        return DiffValue(
            self.value + other.value, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return DiffValue(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-lift(other))

    def __rsub__(self, other):
        return lift(other) + (-self)

    def __mul__(self, other):
        other = lift(other)
        a, b = self.value, other.value
        return DiffValue(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = lift(other)
        a, b = self.value, other.value
        return DiffValue(
            a / b, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape),
                       _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return lift(other) / self

    def __pow__(self, power: float):
        a = self.value
        return DiffValue(a ** power, (self,),
                         lambda g: (g * power * a ** (power - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "DiffValue":
        return DiffValue(self.value.T, (self,), lambda g: (g.T,))

    def sum(self, axis: int | None = None) -> "DiffValue":
        shape = self.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return DiffValue(self.value.sum(axis=axis), (self,), back)

    def mean(self, axis: int | None = None) -> "DiffValue":
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)


def lift(x) -> DiffValue:
    """Wrap a constant as a graph leaf (no-op for DiffValue)."""
    return x if isinstance(x, DiffValue) else DiffValue(x)


class Tape:
    """Nodes reachable from a root, in an order where parents precede children.

    ``backward`` walks the sequence in reverse, visiting each node once, so a
    node's gradient is complete before it is pushed to its parents.
    """

    def __init__(self, nodes: Sequence[DiffValue]):
        self.nodes = list(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_root(cls, root: DiffValue) -> "Tape":
        order: list[DiffValue] = []
        seen: set[int] = set()
        stack: list[tuple[DiffValue, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root: DiffValue):
        # Intermediate gradients restart from zero; leaves keep accumulating.
        for node in self.nodes:
            if node.parents:
                node.grad = np.zeros_like(node.value)
        root.grad = root.grad + np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node._backward is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                parent.grad = parent.grad + g


# elementwise ---------------------------------------------------------------

def exp(x: DiffValue) -> DiffValue:
    out = np.exp(x.value)
    return DiffValue(out, (x,), lambda g: (g * out,))


def log(x: DiffValue) -> DiffValue:
    a = x.value
    return DiffValue(np.log(a), (x,), lambda g: (g / a,))


def tanh(x: DiffValue) -> DiffValue:
    out = np.tanh(x.value)
    return DiffValue(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: DiffValue) -> DiffValue:
    mask = x.value > 0
    return DiffValue(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def identity(x: DiffValue) -> DiffValue:
    return x


def clamp_prob(x: DiffValue, eps: float = PROB_EPS) -> DiffValue:
    """Clip probabilities to [eps, 1 - eps]; gradient is zero where clipped."""
    a = x.value
    inside = (a >= eps) & (a <= 1.0 - eps)
    return DiffValue(np.clip(a, eps, 1.0 - eps), (x,), lambda g: (g * inside,))


def safe_log(p: DiffValue, eps: float = PROB_EPS) -> DiffValue:
    return log(clamp_prob(p, eps))


# linear algebra ------------------------------------------------------------

def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul: shapes {av.shape} and {bv.shape} do not align")

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return DiffValue(av @ bv, (a, b), back)


def affine(x: DiffValue, W: DiffValue, b: DiffValue) -> DiffValue:
    """``W x + b`` for a vector x, or row-wise ``X W^T + b`` for a batch matrix."""
    x, W, b = lift(x), lift(W), lift(b)
    if W.ndim != 2:
        raise DimensionError(f"affine: W must be a matrix, got shape {W.shape}")
    m, n = W.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise DimensionError(f"affine: x has shape {x.shape}, expected last dim {n}")
    if b.shape != (m,):
        raise DimensionError(f"affine: b has shape {b.shape}, expected ({m},)")
    xv, Wv = x.value, W.value

    def back(g):
        if xv.ndim == 1:
            return g @ Wv, np.outer(g, xv), g
        return g @ Wv, g.T @ xv, g.sum(axis=0)

    return DiffValue(xv @ Wv.T + b.value, (x, W, b), back)


def softmax(z: DiffValue) -> DiffValue:
    """Softmax over the last axis, stabilised by max subtraction."""
    z = lift(z)
    shifted = z.value - z.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return DiffValue(out, (z,), back)


def take_rows(x: DiffValue, idx) -> DiffValue:
    """Gather ``x[idx]`` along the first axis (scatter-add on the way back)."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return DiffValue(x.value[idx], (x,), back)


def pick(x: DiffValue, cols) -> DiffValue:
    """Per-row element ``x[i, cols[i]]`` of a matrix, or ``x[cols]`` of a vector."""
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape
    if x.ndim == 1:
        def back(g):
            full = np.zeros(shape)
            np.add.at(full, cols, g)
            return (full,)
        return DiffValue(x.value[cols], (x,), back)
    rows = np.arange(shape[0])

    def back(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return DiffValue(x.value[rows, cols], (x,), back)


def stack(items: Sequence[DiffValue]) -> DiffValue:
    """Stack equal-length vectors into a matrix, one row per item."""
    items = [lift(v) for v in items]
    if not items:
        raise DimensionError("stack: empty sequence")
    return DiffValue(np.stack([v.value for v in items]), items,
                     lambda g: tuple(g[i] for i in range(len(items))))


# gradient checking -----------------------------------------------------------

def grad_check(fn: Callable[[Mapping[str, DiffValue]], DiffValue],
               point: Mapping[str, np.ndarray], eps: float = 1e-6) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn`` receives a mapping of named leaves and returns a scalar node. The
    relative error of a coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    point = {k: _as_array(v) for k, v in point.items()}

    def evaluate(values):
        out = fn({k: DiffValue(v, name=k) for k, v in values.items()})
        val = float(lift(out).value)
        if not math.isfinite(val):
            raise EvaluationError(f"function value is not finite: {val}")
        return val

    leaves = {k: DiffValue(v.copy(), name=k) for k, v in point.items()}
    root = fn(leaves)
    if not np.isfinite(root.value).all():
        raise EvaluationError("function value is not finite")
    root.backward()

    worst = 0.0
    for key, base in point.items():
        analytic = leaves[key].grad
        for pos in np.ndindex(base.shape):
            shifted = dict(point)
            plus, minus = base.copy(), base.copy()
            plus[pos] += eps
            minus[pos] -= eps
            shifted[key] = plus
            f_plus = evaluate(shifted)
            shifted[key] = minus
            f_minus = evaluate(shifted)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[pos])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def leaves_from(arrays: Mapping[str, np.ndarray]) -> dict[str, DiffValue]:
    return {k: DiffValue(v, name=k) for k, v in arrays.items()}
