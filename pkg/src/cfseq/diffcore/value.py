"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Value` wraps an ndarray (rank <= 3) and, when any input requires a
gradient, remembers the primitive that produced it plus a closure that maps
the output cotangent onto input cotangents. :func:`backward` walks the graph
in reverse topological order.
"""
from __future__ import annotations

import numpy as np

SELU_LAMBDA = 1.05070098
SELU_ALPHA = 1.67326324

PRIMITIVES = (
    "add", "sub", "mul", "matmul", "concat", "slice", "broadcast", "sum", "mean",
    "exp", "log", "sigmoid", "tanh", "selu", "softplus", "log_sum_exp", "dot",
    "stop_gradient", "one_hot_gather",
    # structural helpers
    "transpose", "reshape", "take",
)


class Value:
    """Node of the differentiation graph."""

    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "_backward", "name")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} array not supported (max 3), shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = op
        self.parents = tuple(parents)
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value({self.op}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(tag, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{tag}: shape mismatch {a.shape} vs {b.shape}") from None


# Each forward rule returns (output array, vjp) where vjp(g) yields one
# cotangent per input (None for inputs that never need one).

def _f_add(a, b):
    _broadcast_check("add", a, b)
    return a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _f_sub(a, b):
    _broadcast_check("sub", a, b)
    return a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _f_mul(a, b):
    _broadcast_check("mul", a, b)
    return a.data * b.data, lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape))


def _f_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g)


def _f_concat(*xs, axis=-1):
    shapes = [x.shape for x in xs]
    ax = axis % xs[0].ndim
    for s in shapes:
        if len(s) != len(shapes[0]) or any(s[i] != shapes[0][i] for i in range(len(s)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}")
    splits = np.cumsum([s[ax] for s in shapes])[:-1]
    return np.concatenate([x.data for x in xs], axis=ax), lambda g: tuple(np.split(g, splits, axis=ax))


def _is_basic(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def _f_slice(a, key=None):
    out = a.data[key]
    basic = _is_basic(key)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[key] = g
        else:
            np.add.at(ga, key, g)
        return (ga,)
    return out, vjp


def _f_take(a, index=None):
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
        raise ValueError(f"take: bad row index for shape {a.shape}")

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)
    return a.data[index], vjp


def _f_broadcast(a, shape=None):
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


def _f_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return out, vjp


def _f_mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out, vjp_sum = _f_sum(a, axis=axis, keepdims=keepdims)
    return out / count, lambda g: (vjp_sum(g)[0] / count,)


def _f_exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"exp: overflow (max input {a.data.max():.6g})")
    return out, lambda g: (g * out,)


def _f_log(a):
    if np.any(a.data <= 0):
        raise ValueError(f"log: nonpositive input (min {a.data.min():.6g})")
    return np.log(a.data), lambda g: (g / a.data,)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _f_sigmoid(a):
    s = _sigmoid(a.data)
    return s, lambda g: (g * s * (1.0 - s),)


def _f_tanh(a):
    t = np.tanh(a.data)
    return t, lambda g: (g * (1.0 - t * t),)


def _f_selu(a):
    x = a.data
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    out = SELU_LAMBDA * np.where(x > 0, x, neg)
    d = SELU_LAMBDA * np.where(x > 0, 1.0, neg + SELU_ALPHA)
    return out, lambda g: (g * d,)


def _f_softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out, lambda g: (g * _sigmoid(x),)


def _f_log_sum_exp(a, axis=None, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = out.squeeze() if axis is None else out.squeeze(axis)

    def vjp(g):
        if axis is None:
            g = np.reshape(g, (1,) * a.ndim)
        elif not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)
    return out, vjp


def _f_dot(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    return np.sum(a.data * b.data), lambda g: (g * b.data, g * a.data)


def _f_one_hot_gather(a, index=None):
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ValueError(f"one_hot_gather: need (n, K) input and (n,) index, got {a.shape}, {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ValueError(f"one_hot_gather: index out of range for K={a.shape[1]}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)
    return a.data[rows, index], vjp


def _f_transpose(a):
    if a.ndim != 2:
        raise ValueError(f"transpose: need a matrix, got shape {a.shape}")
    return a.data.T.copy(), lambda g: (g.T,)


def _f_reshape(a, shape=None):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


_RULES = {
    "add": _f_add, "sub": _f_sub, "mul": _f_mul, "matmul": _f_matmul,
    "concat": _f_concat, "slice": _f_slice, "broadcast": _f_broadcast,
    "sum": _f_sum, "mean": _f_mean, "exp": _f_exp, "log": _f_log,
    "sigmoid": _f_sigmoid, "tanh": _f_tanh, "selu": _f_selu, "softplus": _f_softplus,
    "log_sum_exp": _f_log_sum_exp, "dot": _f_dot, "one_hot_gather": _f_one_hot_gather,
    "transpose": _f_transpose, "reshape": _f_reshape, "take": _f_take,
}


def apply_primitive(tag, inputs, attrs=None) -> Value:
    """Evaluate primitive ``tag`` on ``inputs`` and record it for backward."""
    attrs = attrs or {}
    inputs = [as_value(x) for x in inputs]
    if tag == "stop_gradient":
        (a,) = inputs
        return Value(a.data.copy(), requires_grad=False, op="stop_gradient")
    try:
        rule = _RULES[tag]
    except KeyError:
        raise ValueError(f"unknown primitive {tag!r}") from None
    out_data, vjp = rule(*inputs, **attrs)
    track = any(x.requires_grad for x in inputs)
    out = Value(out_data, requires_grad=track, op=tag, parents=inputs if track else ())
    if track:
        out._backward = vjp
    return out


def backward(loss: Value) -> dict:
    """Backpropagate from scalar ``loss``.

    Gradients of every tracked node reachable from ``loss`` are reset, then
    accumulated. Returns ``{leaf: grad}`` for the tracked leaves.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        if node._backward is None:
            leaves[node] = node.grad
            continue
        for p, g in zip(node.parents, node._backward(node.grad)):
            if p.requires_grad and g is not None:
                p.grad += g
    return leaves


# thin functional wrappers

def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def concat(xs, axis=-1):
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_(a, key):
    return apply_primitive("slice", [a], {"key": key})


def take(a, index):
    return apply_primitive("take", [a], {"index": index})


def broadcast(a, shape):
    return apply_primitive("broadcast", [a], {"shape": tuple(shape)})


def sum_(a, axis=None, keepdims=False):
    return apply_primitive("sum", [a], {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", [a], {"axis": axis, "keepdims": keepdims})


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def tanh(a):
    return apply_primitive("tanh", [a])


def selu(a):
    return apply_primitive("selu", [a])


def softplus(a):
    return apply_primitive("softplus", [a])


def log_sum_exp(a, axis=None, keepdims=False):
    return apply_primitive("log_sum_exp", [a], {"axis": axis, "keepdims": keepdims})


def dot(a, b):
    return apply_primitive("dot", [a, b])


def stop_gradient(a):
    return apply_primitive("stop_gradient", [a])


def one_hot_gather(a, index):
    return apply_primitive("one_hot_gather", [a], {"index": index})


def transpose(a):
    return apply_primitive("transpose", [a])


def reshape(a, shape):
    return apply_primitive("reshape", [a], {"shape": tuple(shape)})


def log_softmax(logits, axis=-1):
    return logits - log_sum_exp(logits, axis=axis, keepdims=True)
