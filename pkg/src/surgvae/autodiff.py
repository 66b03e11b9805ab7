"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` records every operation as an append-only node. Each node
keeps its value and a closure that maps the node's output gradient to
gradients of its inputs. :func:`backward` walks the tape in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _accel
from .errors import DimensionError, DomainError, NonFiniteError, ProbeError, UsageError


class Tensor:
    """Immutable, finite, float64 array value."""

    __slots__ = ("data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape) or math.prod(shape) != arr.size:
                raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
            arr = arr.reshape(shape)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"operation '{op}' produced NaN or Inf")
    return arr


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "value", "requires_grad", "_backward", "name")

    def __init__(self, graph, op, inputs, value, backward_fn, requires_grad, name=None):
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.value = value
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.id = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        return self.graph.grads[self.id]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.shape})"


class Graph:
    """Append-only tape of operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] = []
        self.attention_probs: list[np.ndarray] = []

    def param(self, value, name=None) -> Node:
        arr = value.data if isinstance(value, Tensor) else _checked(np.asarray(value, dtype=np.float64), "param")
        return Node(self, "param", (), arr, None, True, name)

    def const(self, value, name=None) -> Node:
        arr = value.data if isinstance(value, Tensor) else _checked(np.asarray(value, dtype=np.float64), "const")
        return Node(self, "const", (), arr, None, False, name)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise UsageError("node belongs to a different graph")
            return x
        return self.const(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise UsageError("at least one operand must be a graph node")


def _emit(op, inputs, value, backward_fn):
    g = inputs[0].graph
    value = _checked(value, op)
    req = any(i.requires_grad for i in inputs)
    return Node(g, op, tuple(inputs), value, backward_fn if req else None, req)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.value + b.value, lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)))


def sub(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.value - b.value, lambda gr: (_unbroadcast(gr, sa), _unbroadcast(-gr, sb)))


def mul(a, b) -> Node:
    g = _graph_of(a, b)
    if not isinstance(a, Node) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Node) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = g._lift(a), g._lift(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def bw(gr):
        return _unbroadcast(gr * bv, av.shape), _unbroadcast(gr * av, bv.shape)

    return _emit("mul", (a, b), av * bv, bw)


def div(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    if (bv == 0).any():
        raise DomainError("division by zero")

    def bw(gr):
        return _unbroadcast(gr / bv, av.shape), _unbroadcast(-gr * av / (bv * bv), bv.shape)

    return _emit("div", (a, b), av / bv, bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _emit("scale", (a,), a.value * c, lambda gr: (gr * c,))


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)
    return _emit("add_scalar", (a,), a.value + c, lambda gr: (gr,))


# ---------------------------------------------------------------------------
# unary elementwise


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _emit("exp", (a,), out, lambda gr: (gr * out,))


def log(a: Node) -> Node:
    av = a.value
    if (av <= 0).any():
        raise DomainError("log of non-positive entry")
    return _emit("log", (a,), np.log(av), lambda gr: (gr / av,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _emit("relu", (a,), np.where(mask, a.value, 0.0), lambda gr: (gr * mask,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return _emit("sigmoid", (a,), out, lambda gr: (gr * out * (1.0 - out),))


def softplus(a: Node) -> Node:
    """log(1 + exp(a)) in overflow-safe form."""
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = _sigmoid(av)
    return _emit("softplus", (a,), out, lambda gr: (gr * sig,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _emit("tanh", (a,), out, lambda gr: (gr * (1.0 - out * out),))


def square(a: Node) -> Node:
    av = a.value
    return _emit("square", (a,), av * av, lambda gr: (2.0 * gr * av,))


def sqrt(a: Node) -> Node:
    """Square root with zero subgradient at 0."""
    av = a.value
    if (av < 0).any():
        raise DomainError("sqrt of negative entry")
    out = np.sqrt(av)
    safe = np.where(out > 0, out, 1.0)

    def bw(gr):
        return (np.where(out > 0, 0.5 * gr / safe, 0.0),)

    return _emit("sqrt", (a,), out, bw)


def clip(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _emit("clip", (a,), np.clip(av, lo, hi), lambda gr: (gr * inside,))


_UNARY = {
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Node:
    """Dispatch by operation tag."""
    if op in _UNARY:
        if b is not None:
            raise UsageError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise UsageError(f"{op} is binary")
        return _BINARY[op](a, b)
    raise UsageError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Node:
    """Matrix product; 3-d operands are treated as a batch of matrices."""
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or (
        av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]
    ):
        raise DimensionError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def bw(gr):
        ga = gr @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ gr
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit("matmul", (a, b), av @ bv, bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = a.shape
    axis = _norm_axis(axis, a.value.ndim)
    if axis is None:
        return _emit("sum", (a,), np.asarray(a.value.sum()), lambda gr: (np.broadcast_to(gr, shape).copy(),))
    out = a.value.sum(axis=axis)
    return _emit("sum", (a,), out, lambda gr: (np.broadcast_to(np.expand_dims(gr, axis), shape).copy(),))


def mean(a: Node, axis: int | None = None) -> Node:
    axis_n = _norm_axis(axis, a.value.ndim)
    count = a.value.size if axis_n is None else a.shape[axis_n]
    return scale(sum(a, axis_n), 1.0 / count)


def reduce(op: str, a: Node, axis: int | None = None) -> Node:
    if op == "sum":
        return sum(a, axis)
    if op == "mean":
        return mean(a, axis)
    raise UsageError(f"unknown reduction '{op}'")


def logsumexp(a: Node, axis: int) -> Node:
    axis = _norm_axis(axis, a.value.ndim)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def bw(gr):
        return (np.expand_dims(gr, axis) * w,)

    return _emit("logsumexp", (a,), out, bw)


def softmax_rows(a: Node) -> Node:
    """Softmax along the last axis with max subtraction."""
    av = a.value
    e = np.exp(av - av.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(gr):
        return (out * (gr - (gr * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (a,), out, bw)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a: Node, shape) -> Node:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda gr: (gr.reshape(old),))


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    return _emit("transpose", (a,), np.swapaxes(a.value, -1, -2), lambda gr: (np.swapaxes(gr, -1, -2),))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    shape = a.shape
    if not 0 <= start < stop <= shape[-1]:
        raise DimensionError(f"column slice [{start}:{stop}] out of range for {shape}")

    def bw(gr):
        full = np.zeros(shape)
        full[..., start:stop] = gr
        return (full,)

    return _emit("slice_cols", (a,), a.value[..., start:stop], bw)


def take_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(gr):
        full = np.zeros(shape)
        np.add.at(full, idx, gr)
        return (full,)

    return _emit("take_rows", (a,), a.value[idx], bw)


def take_flat(a: Node, idx) -> Node:
    """Gather entries of the flattened value."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(gr):
        full = np.zeros(a.value.size)
        np.add.at(full, idx, gr)
        return (full.reshape(shape),)

    return _emit("take_flat", (a,), a.value.reshape(-1)[idx], bw)


def concat_cols(parts: Sequence[Node]) -> Node:
    """Concatenate along the last axis."""
    widths = [p.shape[-1] for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=-1)
    except ValueError:
        raise DimensionError(f"concat_cols: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0, *widths])

    def bw(gr):
        return tuple(gr[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", tuple(parts), out, bw)


# ---------------------------------------------------------------------------
# fused kernels


def pairwise_sqdist(a: Node, b: Node) -> Node:
    """out[i, j] = ||a_i - b_j||^2, computed from explicit differences."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"pairwise_sqdist: incompatible shapes {av.shape} and {bv.shape}")
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def bw(gr):
        gd = 2.0 * gr[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _emit("pairwise_sqdist", (a, b), out, bw)


def attention(q: Node, k: Node, v: Node) -> Node:
    """softmax(q k^T / sqrt(d)) v for each sequence in a (n, L, d) batch."""
    qv, kv, vv = q.value, k.value, v.value
    if qv.ndim != 3 or qv.shape != kv.shape or qv.shape != vv.shape:
        raise DimensionError(f"attention: shapes {qv.shape}, {kv.shape}, {vv.shape} must agree and be 3-d")
    out, p = _accel.attention_forward(qv, kv, vv)

    def bw(gr):
        return _accel.attention_backward(qv, kv, vv, p, gr)

    node = _emit("attention", (q, k, v), out, bw)
    node.graph.attention_probs.append(p)
    return node


# ---------------------------------------------------------------------------


def backward(graph: Graph, root: Node, wrt: Sequence[Node] | None = None):
    """Reverse sweep from a scalar root.

    Gradients are reset on every call. Returns a list aligned with ``wrt``
    (or with every param node when ``wrt`` is None); nodes the root does not
    depend on get zeros.
    """
    if root.graph is not graph:
        raise UsageError("root is not part of this graph")
    if root.value.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[root.id] = np.ones_like(root.value)
    for node in reversed(graph.nodes[: root.id + 1]):
        g = grads[node.id]
        if g is None or node._backward is None:
            continue
        for inp, gi in zip(node.inputs, node._backward(g)):
            if not inp.requires_grad:
                continue
            if grads[inp.id] is None:
                grads[inp.id] = np.array(gi, dtype=np.float64)
            else:
                grads[inp.id] = grads[inp.id] + gi
    for i, node in enumerate(graph.nodes):
        if grads[i] is None and node.requires_grad:
            grads[i] = np.zeros_like(node.value)
    graph.grads = grads
    targets = wrt if wrt is not None else [n for n in graph.nodes if n.op == "param"]
    return [grads[n.id] for n in targets]


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    max_rel_error: float
    worst_index: tuple
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_error < self.tol)


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(
    f: Callable[[Graph, Node], Node],
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f(graph, p)`` must build a scalar from the param node ``p``. ``coords``
    limits the probe to a subset of flat indices.
    """
    p0 = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    g = Graph()
    pn = g.param(p0)
    root = f(g, pn)
    (analytic,) = backward(g, root, [pn])

    def value_at(p):
        gg = Graph()
        return float(f(gg, gg.param(p)).value)

    flat = p0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    numeric = np.zeros(flat.size)
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            p = flat.copy()
            p[i] += sgn * h
            try:
                v = value_at(p.reshape(p0.shape))
            except (NonFiniteError, DomainError) as exc:
                raise ProbeError(f"objective not evaluable at coordinate {i}: {exc}") from exc
            if not math.isfinite(v):
                raise ProbeError(f"objective not finite at coordinate {i}")
            vals.append(v)
        numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
    a_flat = analytic.reshape(-1)
    if coords is not None:
        mask = np.zeros(flat.size, bool)
        mask[list(coords)] = True
        a_cmp = np.where(mask, a_flat, 0.0)
    else:
        a_cmp = a_flat
    err = relative_error(a_cmp, numeric)
    worst = int(np.argmax(err)) if err.size else 0
    return GradCheckReport(
        analytic=analytic,
        numeric=numeric.reshape(p0.shape),
        rel_error=err.reshape(p0.shape),
        max_rel_error=float(err.max()) if err.size else 0.0,
        worst_index=np.unravel_index(worst, p0.shape),
        tol=tol,
    )
