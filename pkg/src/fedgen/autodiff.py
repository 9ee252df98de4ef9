"""Small reverse-mode autodiff over a fixed set of array operators.

A :class:`Graph` is an append-only tape.  Every node stores the operator
tag, the ids of its inputs and the cached output value, so inputs always
precede their consumers and the backward sweep is a plain reverse loop.

Shapes are deliberately restricted: operands are 0-d, 1-d or 2-d float64
arrays.  The only broadcast allowed is a 1-d "row" operand against a 2-d
batch whose trailing dimension matches (bias add, feature gating).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operator's rule."""


class Tensor:
    """Immutable float64 array with a finiteness guarantee."""

    __slots__ = ("data",)

    def __init__(self, data, *, _owned=False):
        # op outputs are fresh arrays and need no defensive copy
        arr = data if _owned else np.array(data, dtype=np.float64)
        # a sum is non-finite whenever any element is; fall back to the exact
        # test only in the rare overflow case
        if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise ValueError("Tensor values must be finite (got NaN or Inf)")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    """Numerically stable logistic function on arrays or scalars."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return float(_stable_sigmoid(arr.reshape(1))[0])
    return _stable_sigmoid(arr)


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# -- shape rules -------------------------------------------------------------

def _fail(op, *shapes):
    raise ShapeError(f"{op}: incompatible operand shapes {', '.join(map(str, shapes))}")


def _is_row_broadcast(a, b):
    return a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]


def _check_elementwise(op, a, b):
    if a.shape != b.shape and not _is_row_broadcast(a, b):
        _fail(op, a.shape, b.shape)


def _reduce_like(grad, like):
    # undo the row broadcast for the 1-d operand
    if grad.shape != like.shape:
        return grad.sum(axis=0)
    return grad


# -- operators ---------------------------------------------------------------
# Each backward returns one gradient per input, given the upstream gradient.

def _add_fwd(op, a, b):
    _check_elementwise(op, a, b)
    return a + b


def _add_bwd(g, ins, out, attrs):
    a, b = ins
    return g, _reduce_like(g, b)


def _sub_fwd(op, a, b):
    _check_elementwise(op, a, b)
    return a - b


def _sub_bwd(g, ins, out, attrs):
    a, b = ins
    return g, -_reduce_like(g, b)


def _mul_fwd(op, a, b):
    _check_elementwise(op, a, b)
    return a * b


def _mul_bwd(g, ins, out, attrs):
    a, b = ins
    return g * b, _reduce_like(g * a, b)


def _matvec_fwd(op, w, x):
    # x may be a single vector (j,) or a batch of row vectors (n, j)
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        _fail(op, w.shape, x.shape)
    return x @ w.T


def _matvec_bwd(g, ins, out, attrs):
    w, x = ins
    if x.ndim == 1:
        return np.outer(g, x), w.T @ g
    return g.T @ x, g @ w


def _relu_fwd(op, a):
    return np.maximum(a, 0.0)


def _relu_bwd(g, ins, out, attrs):
    # subgradient at exactly 0 is 0
    return (g * (ins[0] > 0.0),)


def _sigmoid_fwd(op, a):
    return sigmoid(a) if a.ndim else np.asarray(sigmoid(a))


def _sigmoid_bwd(g, ins, out, attrs):
    return (g * out * (1.0 - out),)


def _softmax_fwd(op, a):
    if a.ndim not in (1, 2):
        _fail(op, a.shape)
    return _softmax(a)


def _softmax_bwd(g, ins, out, attrs):
    inner = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - inner),)


def _ce_fwd(op, z, *, target):
    if z.ndim not in (1, 2):
        _fail(op, z.shape)
    t = np.asarray(target)
    expected = () if z.ndim == 1 else (z.shape[0],)
    if t.shape != expected:
        _fail(op, z.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= z.shape[-1]):
        raise ShapeError(f"{op}: target class out of range for {z.shape[-1]} logits")
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(z, t.reshape(expected + (1,)), axis=-1)[..., 0]
    return lse - picked


def _ce_bwd(g, ins, out, attrs):
    z = ins[0]
    t = np.asarray(attrs["target"])
    resid = _softmax(z)
    if z.ndim == 1:
        resid[t] -= 1.0
        return (resid * g,)
    resid[np.arange(z.shape[0]), t] -= 1.0
    return (resid * g[:, None],)


def _dot_fwd(op, a, b):
    # 1-d: inner product; 2-d: row-wise inner products
    if a.shape != b.shape or a.ndim not in (1, 2):
        _fail(op, a.shape, b.shape)
    return (a * b).sum(axis=-1)


def _dot_bwd(g, ins, out, attrs):
    a, b = ins
    if a.ndim == 2:
        g = g[:, None]
    return g * b, g * a


def _square_fwd(op, a):
    return a * a


def _square_bwd(g, ins, out, attrs):
    return (2.0 * ins[0] * g,)


def _sum_fwd(op, a):
    return np.asarray(a.sum())


def _sum_bwd(g, ins, out, attrs):
    return (np.full(ins[0].shape, float(g)),)


def _scale_fwd(op, a, *, factor):
    return a * float(factor)


def _scale_bwd(g, ins, out, attrs):
    return (g * float(attrs["factor"]),)


def _l1_fwd(op, a):
    return np.asarray(np.abs(a).sum())


def _l1_bwd(g, ins, out, attrs):
    # sign(0) == 0 gives the zero subgradient at the kink
    return (np.sign(ins[0]) * float(g),)


@dataclass(frozen=True)
class _Operator:
    arity: int
    forward: Callable
    backward: Callable


OPERATORS: dict[str, _Operator] = {
    "add": _Operator(2, _add_fwd, _add_bwd),
    "sub": _Operator(2, _sub_fwd, _sub_bwd),
    "mul": _Operator(2, _mul_fwd, _mul_bwd),
    "matvec": _Operator(2, _matvec_fwd, _matvec_bwd),
    "relu": _Operator(1, _relu_fwd, _relu_bwd),
    "sigmoid": _Operator(1, _sigmoid_fwd, _sigmoid_bwd),
    "softmax": _Operator(1, _softmax_fwd, _softmax_bwd),
    "softmax_ce": _Operator(1, _ce_fwd, _ce_bwd),
    "dot": _Operator(2, _dot_fwd, _dot_bwd),
    "square": _Operator(1, _square_fwd, _square_bwd),
    "sum": _Operator(1, _sum_fwd, _sum_bwd),
    "scale": _Operator(1, _scale_fwd, _scale_bwd),
    "l1": _Operator(1, _l1_fwd, _l1_bwd),
}


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: Tensor
    attrs: dict = field(default_factory=dict)


class Graph:
    """Append-only computation tape.

    Leaves are created with :meth:`param` (differentiable roots) or
    :meth:`const`.  :meth:`apply` records an operator node and returns its id.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.roots: list[int] = []

    def _append(self, op, inputs, value, attrs=None) -> int:
        self.nodes.append(_Node(op, tuple(inputs), value, attrs or {}))
        return len(self.nodes) - 1

    def param(self, data) -> int:
        node = self._append("param", (), data if isinstance(data, Tensor) else Tensor(data))
        self.roots.append(node)
        return node

    def const(self, data) -> int:
        return self._append("const", (), data if isinstance(data, Tensor) else Tensor(data))

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        try:
            spec = OPERATORS[op]
        except KeyError:
            raise ValueError(f"unknown operator {op!r}") from None
        if len(inputs) != spec.arity:
            raise ShapeError(f"{op}: expected {spec.arity} inputs, got {len(inputs)}")
        n_nodes = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n_nodes:
                raise ValueError(f"{op}: unknown input node {i}")
        nodes = self.nodes
        args = [nodes[i].value.data for i in inputs]
        out = np.asarray(spec.forward(op, *args, **attrs), dtype=np.float64)
        try:
            value = Tensor(out, _owned=True)
        except ValueError:
            raise ValueError(f"{op}: non-finite result") from None
        return self._append(op, inputs, value, attrs)

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value.data

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of the scalar node ``loss`` for every root parameter."""
        if self.nodes[loss].value.shape != ():
            raise ShapeError(
                f"backward: loss must be scalar, got shape {self.nodes[loss].value.shape}"
            )
        # only nodes that reach a root need a gradient
        needs = [False] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            needs[i] = node.op == "param" or any(needs[j] for j in node.inputs)

        grads: list[np.ndarray | None] = [None] * (loss + 1)
        grads[loss] = np.ones(())
        for i in range(loss, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.inputs:
                continue
            ins = [self.nodes[j].value.data for j in node.inputs]
            parts = OPERATORS[node.op].backward(g, ins, node.value.data, node.attrs)
            for j, part in zip(node.inputs, parts):
                if not needs[j]:
                    continue
                grads[j] = part if grads[j] is None else grads[j] + part

        out = {}
        for r in self.roots:
            g = grads[r] if r <= loss else None
            out[r] = np.zeros(self.nodes[r].value.shape) if g is None else np.asarray(g, dtype=np.float64)
        return out


def op_apply(graph: Graph, op: str, inputs) -> int:
    """Functional alias for :meth:`Graph.apply`."""
    return graph.apply(op, *inputs)


def backward(graph: Graph, loss: int) -> dict[int, np.ndarray]:
    return graph.backward(loss)


def finite_diff_gradient(f, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
