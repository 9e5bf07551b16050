"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Values are computed eagerly when an op is recorded; ``Tape.backward`` walks
the tape in reverse and accumulates adjoints. Element-wise ops follow numpy
broadcasting and reduce adjoints back to the operand shape.

    >>> tape = Tape()
    >>> x = tape.leaf(3.0)
    >>> y = x * x
    >>> grads = tape.backward(y)
    >>> float(grads[x])
    6.0
"""

from __future__ import annotations

import weakref
from typing import Callable

import numpy as np


class GradError(ValueError):
    """Raised for shape mismatches, unknown ops and invalid roots."""


class Node:
    """One recorded value on a tape.

    The node refers to its tape weakly, so a dropped tape is freed at once
    rather than waiting for the cycle collector. ``value`` stays readable
    afterwards; recording new ops on it raises ``GradError``.
    """

    __slots__ = ("_tape", "index", "op", "parents", "value", "attrs", "requires_grad", "grad")

    def __init__(self, tape, index, op, parents, value, attrs, requires_grad):
        self._tape = weakref.ref(tape)
        self.index = index
        self.op = op
        self.parents = parents
        self.value = value
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def tape(self):
        tape = self._tape()
        if tape is None:
            raise GradError("the tape holding this node has been released")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"

    # arithmetic sugar; constants are lifted onto the same tape
    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        return self.tape.record("mul", self, other)

    def __rmul__(self, other):
        return self.tape.record("mul", other, self)

    def __truediv__(self, other):
        return self.tape.record("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.record("div", other, self)

    def __neg__(self):
        return self.tape.record("negate", self)

    def __matmul__(self, other):
        return self.tape.record("matmul", self, other)

    def __getitem__(self, index):
        return self.tape.record("getitem", self, index=index)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GradError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return patches, oh, ow


# Each op: forward(values, attrs) -> value ; backward(grad, values, out, attrs) -> per-input grads.

def _fw_conv2d(vals, attrs):
    x, k = vals[0], vals[1]
    stride = attrs.get("stride", 1)
    if x.ndim != 4 or k.ndim != 4:
        raise GradError("conv2d expects x (N,C,H,W) and kernel (O,C,kh,kw)")
    if x.shape[1] != k.shape[1]:
        raise GradError(f"conv2d: channel mismatch {x.shape[1]} vs {k.shape[1]}")
    patches, oh, ow = _im2col(x, k.shape[2], k.shape[3], stride)
    if oh < 1 or ow < 1:
        raise GradError("conv2d: kernel larger than input")
    return np.einsum("nckloh,dckl->ndoh", patches, k, optimize=True)


def _bw_conv2d(g, vals, out, attrs):
    x, k = vals[0], vals[1]
    stride = attrs.get("stride", 1)
    kh, kw = k.shape[2], k.shape[3]
    patches, oh, ow = _im2col(x, kh, kw, stride)
    gk = np.einsum("ndoh,nckloh->dckl", g, patches, optimize=True)
    gx = np.zeros_like(x)
    # scatter each kernel tap back onto the strided input grid
    gcol = np.einsum("ndoh,dckl->nckloh", g, k, optimize=True)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcol[:, :, i, j]
    return gx, gk


def _bw_matmul(g, vals, out, attrs):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return g @ b.T, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _fw_matmul(vals, attrs):
    a, b = vals
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise GradError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    if a.ndim > 2 or b.ndim > 2:
        raise GradError("matmul supports at most 2-d operands")
    return a @ b


def _fw_l2n(vals, attrs):
    x = vals[0]
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise GradError("l2_normalize: zero-length vector")
    return x / norm


def _bw_l2n(g, vals, out, attrs):
    x = vals[0]
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm,)


def _bw_norm(g, vals, out, attrs):
    x = vals[0]
    n = out[..., None]
    safe = np.where(n > 0, n, 1.0)
    return (np.where(n > 0, x / safe, 0.0) * g[..., None],)


def _fw_sum(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _bw_sum(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _fw_mean(vals, attrs):
    return np.mean(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _bw_mean(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape) / count,)


def _fw_dot(vals, attrs):
    a, b = vals
    if a.shape[-1] != b.shape[-1]:
        raise GradError(f"dot: last dimensions differ ({a.shape}, {b.shape})")
    return np.sum(a * b, axis=-1)


def _bw_dot(g, vals, out, attrs):
    a, b = vals
    ge = np.expand_dims(g, -1)
    return _unbroadcast(ge * b, a.shape), _unbroadcast(ge * a, b.shape)


def _fw_concat(vals, attrs):
    try:
        return np.concatenate(vals, axis=attrs.get("axis", -1))
    except ValueError as exc:
        raise GradError(f"concat: {exc}") from None


def _bw_concat(g, vals, out, attrs):
    axis = attrs.get("axis", -1)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _bw_getitem(g, vals, out, attrs):
    gx = np.zeros_like(vals[0])
    np.add.at(gx, attrs["index"], g)
    return (gx,)


def _elementwise(fw, dfdx):
    """Unary op from a forward function and a derivative f'(x, out)."""
    return (lambda vals, attrs: fw(vals[0]), lambda g, vals, out, attrs: (g * dfdx(vals[0], out),))


def _binary(fw, bw):
    def forward(vals, attrs, _fw=fw, _name=None):
        return fw(*vals)

    def backward(g, vals, out, attrs):
        ga, gb = bw(g, vals[0], vals[1], out)
        return _unbroadcast(ga, vals[0].shape), _unbroadcast(gb, vals[1].shape)

    return forward, backward


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": _binary(np.add, lambda g, a, b, o: (g, g)),
    "sub": _binary(np.subtract, lambda g, a, b, o: (g, -g)),
    "mul": _binary(np.multiply, lambda g, a, b, o: (g * b, g * a)),
    "div": _binary(np.divide, lambda g, a, b, o: (g / b, -g * a / (b * b))),
    "negate": _elementwise(np.negative, lambda x, o: -1.0),
    "matmul": (_fw_matmul, _bw_matmul),
    "conv2d": (_fw_conv2d, _bw_conv2d),
    "relu": _elementwise(lambda x: np.maximum(x, 0.0), lambda x, o: (x > 0).astype(x.dtype)),
    "clamp_min_zero": _elementwise(lambda x: np.maximum(x, 0.0), lambda x, o: (x > 0).astype(x.dtype)),
    "leaky_relu": _elementwise(lambda x: np.where(x > 0, x, 0.01 * x), lambda x, o: np.where(x > 0, 1.0, 0.01)),
    "sigmoid": _elementwise(_sigmoid, lambda x, o: o * (1.0 - o)),
    "softplus": _elementwise(_softplus, lambda x, o: _sigmoid(x)),
    "tanh": _elementwise(np.tanh, lambda x, o: 1.0 - o * o),
    "sin": _elementwise(np.sin, lambda x, o: np.cos(x)),
    "cos": _elementwise(np.cos, lambda x, o: -np.sin(x)),
    "exp": _elementwise(np.exp, lambda x, o: o),
    "sqrt": _elementwise(np.sqrt, lambda x, o: 0.5 / o),
    "abs": _elementwise(np.abs, lambda x, o: np.sign(x)),
    "square": _elementwise(np.square, lambda x, o: 2.0 * x),
    "step_straight_through": _elementwise(lambda x: (x > 0.5).astype(x.dtype), lambda x, o: 1.0),
    "sum": (_fw_sum, _bw_sum),
    "mean": (_fw_mean, _bw_mean),
    "dot": (_fw_dot, _bw_dot),
    "l2_normalize": (_fw_l2n, _bw_l2n),
    "norm": (lambda vals, attrs: np.sqrt(np.sum(vals[0] ** 2, axis=-1)), _bw_norm),
    "concat": (_fw_concat, _bw_concat),
    "reshape": (
        lambda vals, attrs: vals[0].reshape(attrs["shape"]),
        lambda g, vals, out, attrs: (g.reshape(vals[0].shape),),
    ),
    "transpose": (lambda vals, attrs: vals[0].T, lambda g, vals, out, attrs: (g.T,)),
    "getitem": (lambda vals, attrs: vals[0][attrs["index"]], _bw_getitem),
    # same value, severed from the graph: used for ablation cuts
    "stop_gradient": (lambda vals, attrs: vals[0].copy(), lambda g, vals, out, attrs: (np.zeros_like(vals[0]),)),
}

_BINARY = {"add", "sub", "mul", "div"}
_NARY = {"concat"}


class Tape:
    """Single-writer record of nodes in topological (insertion) order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, value, attrs, requires_grad):
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{op}: non-finite value produced")
        node = Node(self, len(self.nodes), op, parents, value, attrs, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad=True) -> Node:
        arr = np.array(value, dtype=self.dtype)
        return self._append("leaf", (), arr, {}, requires_grad)

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def _lift(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise GradError("node belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, op: str, *inputs, **attrs) -> Node:
        if op not in OPS:
            raise GradError(f"unknown op-kind {op!r}")
        parents = tuple(self._lift(x) for x in inputs)
        vals = [p.value for p in parents]
        if op in _BINARY:
            _check_broadcast(vals[0], vals[1], op)
        elif op not in _NARY and op != "matmul" and op != "conv2d" and op != "dot" and len(parents) != 1:
            raise GradError(f"{op} takes one input, got {len(parents)}")
        forward = OPS[op][0]
        value = np.asarray(forward(vals, attrs), dtype=self.dtype)
        requires_grad = op != "stop_gradient" and any(p.requires_grad for p in parents)
        return self._append(op, parents, value, attrs, requires_grad)

    def backward(self, root: Node) -> dict[Node, np.ndarray]:
        """Accumulate adjoints from a scalar ``root``; returns leaf gradients."""
        if isinstance(root, (list, tuple)):
            raise GradError("backward takes a single root")
        if root.tape is not self:
            raise GradError("root belongs to a different tape")
        if root.value.size != 1:
            raise GradError(f"root must be scalar, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            if node.grad is None or not node.parents or not node.requires_grad:
                continue
            backward = OPS[node.op][1]
            grads = backward(node.grad, [p.value for p in node.parents], node.value, node.attrs)
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=self.dtype)
                if g.shape != parent.value.shape:
                    g = _unbroadcast(np.broadcast_to(g, np.broadcast_shapes(g.shape, parent.value.shape)), parent.value.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        out = {}
        for node in self.nodes:
            if node.op == "leaf" and node.requires_grad:
                out[node] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


# Functional wrappers, so model code reads like numpy.

def _unary(name):
    def fn(x, **attrs):
        return x.tape.record(name, x, **attrs)

    fn.__name__ = name
    return fn


relu = _unary("relu")
clamp_min_zero = _unary("clamp_min_zero")
leaky_relu = _unary("leaky_relu")
sigmoid = _unary("sigmoid")
softplus = _unary("softplus")
tanh = _unary("tanh")
sin = _unary("sin")
cos = _unary("cos")
exp = _unary("exp")
sqrt = _unary("sqrt")
absolute = _unary("abs")
square = _unary("square")
l2_normalize = _unary("l2_normalize")
norm = _unary("norm")
step_straight_through = _unary("step_straight_through")
stop_gradient = _unary("stop_gradient")


def sum_(x, axis=None, keepdims=False):
    return x.tape.record("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return x.tape.record("mean", x, axis=axis, keepdims=keepdims)


def dot(a, b):
    tape = a.tape if isinstance(a, Node) else b.tape
    return tape.record("dot", a, b)


def concat(nodes, axis=-1):
    tape = next(n.tape for n in nodes if isinstance(n, Node))
    return tape.record("concat", *nodes, axis=axis)


def reshape(x, shape):
    return x.tape.record("reshape", x, shape=tuple(shape))


def transpose(x):
    return x.tape.record("transpose", x)


def conv2d(x, kernel, stride=1):
    return x.tape.record("conv2d", x, kernel, stride=stride)


def check_gradient(fn: Callable[[Node], Node], point, step: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a leaf node to a scalar node. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    analytic = tape.backward(fn(x))[x]

    def value_at(p):
        t = Tape()
        return float(fn(t.leaf(p)).value)

    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    for i in range(point.size):
        hi = point.copy().reshape(-1)
        lo = point.copy().reshape(-1)
        hi[i] += step
        lo[i] -= step
        flat[i] = (value_at(hi.reshape(point.shape)) - value_at(lo.reshape(point.shape))) / (2 * step)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise FloatingPointError("non-finite gradient estimate")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))
