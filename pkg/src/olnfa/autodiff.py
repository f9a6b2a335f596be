"""A small reverse-mode differentiation engine over numpy arrays.

Every differentiable operation is an :class:`Op` held in an
:class:`OpRegistry`. An op is a pair of plain functions:

``forward(*arrays, **attrs) -> (out, ctx)``
    computes the output array and whatever the adjoint will need;
``adjoint(ctx, g) -> tuple``
    maps the output adjoint ``g`` to one vector-Jacobian product per input
    (``None`` for inputs that carry no gradient, e.g. integer indices).

Calling an op on :class:`Tensor` arguments records a node when at least one
argument requires a gradient. :func:`backward` sweeps the recorded graph in
reverse topological order from a scalar root.

Dtype follows the inputs: training runs in float32, gradient checks in
float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Op",
    "OpRegistry",
    "REGISTRY",
    "register_op",
    "backward",
    "as_tensor",
]


class Tensor:
    """An array that may sit in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_ctx", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op: Op | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx: Any = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", op={self._op.name}" if self._op is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; all of it routes through the registry
    def __add__(self, other):
        return REGISTRY["add"](self, other)

    def __radd__(self, other):
        return REGISTRY["add"](other, self)

    def __sub__(self, other):
        return REGISTRY["sub"](self, other)

    def __rsub__(self, other):
        return REGISTRY["sub"](other, self)

    def __mul__(self, other):
        return REGISTRY["mul"](self, other)

    def __rmul__(self, other):
        return REGISTRY["mul"](other, self)

    def __truediv__(self, other):
        return REGISTRY["div"](self, other)

    def __rtruediv__(self, other):
        return REGISTRY["div"](other, self)

    def __neg__(self):
        return REGISTRY["sub"](0.0, self)

    def __getitem__(self, index):
        return REGISTRY["gather"](self, index=index)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Op:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    adjoint: Callable[[Any, np.ndarray], Sequence[np.ndarray | None]]

    def __call__(self, *inputs, **attrs) -> Tensor:
        dtype = next((t.dtype for t in inputs if isinstance(t, Tensor)), None)
        tensors = tuple(as_tensor(t, dtype) for t in inputs)
        out, ctx = self.forward(*(t.data for t in tensors), **attrs)
        result = Tensor(out)
        if any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result._op = self
            result._parents = tensors
            result._ctx = ctx
        return result


@dataclass
class OpRegistry:
    ops: dict[str, Op] = field(default_factory=dict)

    def register(self, name: str, forward, adjoint) -> Op:
        if name in self.ops:
            raise ValueError(f"op {name!r} is already registered")
        op = Op(name, forward, adjoint)
        self.ops[name] = op
        return op

    def __getitem__(self, name: str) -> Op:
        return self.ops[name]

    def __contains__(self, name: str) -> bool:
        return name in self.ops

    def names(self) -> list[str]:
        return list(self.ops)


REGISTRY = OpRegistry()


def register_op(name: str, forward, adjoint, registry: OpRegistry | None = None) -> Op:
    """Add an op to ``registry`` (the global one by default) and return it."""
    return (registry or REGISTRY).register(name, forward, adjoint)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None):
    """Reverse sweep from a scalar ``root``.

    Sets ``.grad`` on every leaf that requires a gradient (replacing any
    previous value). With ``leaves`` given, returns their adjoints in the
    same order, zeros for leaves the root does not depend on; otherwise
    returns a ``{leaf: adjoint}`` dict of the leaves reached.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    adjoints: dict[int, np.ndarray] = {}
    reached: dict[int, Tensor] = {}
    if root.requires_grad:
        adjoints[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = adjoints.pop(id(node), None) if node._op is not None else adjoints.get(id(node))
            if node._op is None:
                reached[id(node)] = node
                continue
            if g is None:
                continue
            grads = node._op.adjoint(node._ctx, g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.data.shape:
                    raise ValueError(
                        f"adjoint of {node._op.name} has shape {pg.shape}, "
                        f"input has {parent.data.shape}")
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
    result = {}
    for key, leaf in reached.items():
        leaf.grad = adjoints.get(key, np.zeros_like(leaf.data))
        result[leaf] = leaf.grad
    if leaves is None:
        return result
    out = []
    for leaf in leaves:
        if id(leaf) in reached:
            out.append(leaf.grad)
        else:
            leaf.grad = np.zeros_like(leaf.data)
            out.append(leaf.grad)
    return out


# ----------------------------------------------------------------------
# elementwise ops
# ----------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_shapes(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from exc
    return a.shape, b.shape


def _add_fwd(a, b):
    return a + b, _binary_shapes(a, b)


def _add_adj(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    return a - b, _binary_shapes(a, b)


def _sub_adj(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_fwd(a, b):
    _binary_shapes(a, b)
    return a * b, (a, b)


def _mul_adj(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _binary_shapes(a, b)
    return a / b, (a, b)


def _div_adj(ctx, g):
    a, b = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _ln_fwd(x):
    return np.log(x), x


def _ln_adj(x, g):
    return (g / x,)


def _exp_fwd(x):
    y = np.exp(x)
    return y, y


def _exp_adj(y, g):
    return (g * y,)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow warnings for large ``|x|``."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logistic_fwd(x):
    y = sigmoid_array(np.asarray(x))
    return y, y


def _logistic_adj(y, g):
    return (g * y * (1.0 - y),)


def _leaky_fwd(x, slope=0.1):
    slope = np.asarray(slope, dtype=x.dtype)
    mask = x > 0
    return np.where(mask, x, slope * x), (mask, slope)


def _leaky_adj(ctx, g):
    mask, slope = ctx
    return (np.where(mask, g, slope * g),)


def _min_fwd(a, b):
    _binary_shapes(a, b)
    pick_a = a <= b
    return np.where(pick_a, a, b), (pick_a, a.shape, b.shape)


def _max_fwd(a, b):
    _binary_shapes(a, b)
    pick_a = a >= b
    return np.where(pick_a, a, b), (pick_a, a.shape, b.shape)


def _minmax_adj(ctx, g):
    pick_a, sa, sb = ctx
    return (_unbroadcast(np.where(pick_a, g, 0.0), sa),
            _unbroadcast(np.where(pick_a, 0.0, g), sb))


def _clip_fwd(x, lo=-np.inf, hi=np.inf):
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), inside


def _clip_adj(inside, g):
    return (np.where(inside, g, 0.0),)


# ----------------------------------------------------------------------
# reductions, reshapes, indexing
# ----------------------------------------------------------------------

def _sum_fwd(x, axis=None):
    return np.sum(x, axis=axis), (x.shape, axis)


def _sum_adj(ctx, g):
    shape, axis = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(x, axis=None):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return np.mean(x, axis=axis), (x.shape, axis, n)


def _mean_adj(ctx, g):
    shape, axis, n = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, shape).copy(),)


def _spatial_sum_fwd(x):
    if x.ndim < 2:
        raise ValueError("spatial_sum needs at least 2 dims")
    return x.sum(axis=(-2, -1)), x.shape


def _spatial_sum_adj(shape, g):
    return (np.broadcast_to(g[..., None, None], shape).copy(),)


def _spatial_mean_fwd(x):
    if x.ndim < 2:
        raise ValueError("spatial_mean needs at least 2 dims")
    return x.mean(axis=(-2, -1)), x.shape


def _spatial_mean_adj(shape, g):
    n = shape[-1] * shape[-2]
    return (np.broadcast_to(g[..., None, None] / n, shape).copy(),)


def _reshape_fwd(x, shape=None):
    return x.reshape(shape), x.shape


def _reshape_adj(shape, g):
    return (g.reshape(shape),)


def _transpose_fwd(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    return np.ascontiguousarray(np.transpose(x, axes)), np.argsort(axes)


def _transpose_adj(inverse, g):
    return (np.transpose(g, inverse),)


def _gather_fwd(x, index=None):
    return np.array(x[index]), (x.shape, index)


def _gather_adj(ctx, g):
    shape, index = ctx
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, index, g)
    return (out,)


# ----------------------------------------------------------------------
# 2-D convolution, NCHW, square kernel, zero padding
# ----------------------------------------------------------------------

def _conv_fwd(x, w, b, stride=1, padding=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x (N,C,H,W) and w (Co,C,k,k)")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} filters")
    n, c, _, _ = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = w.reshape(co, -1)
    out = cols @ wm.T + b
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, wm, x.shape, w.shape, xp.shape, stride, padding, ho, wo)


def _conv_adj(ctx, g):
    cols, wm, xshape, wshape, pshape, stride, padding, ho, wo = ctx
    n, c = xshape[:2]
    co, _, k, _ = wshape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
    gw = (gm.T @ cols).reshape(wshape)
    gb = gm.sum(axis=0)
    dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros(pshape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp, gw, gb


add = register_op("add", _add_fwd, _add_adj)
sub = register_op("sub", _sub_fwd, _sub_adj)
mul = register_op("mul", _mul_fwd, _mul_adj)
div = register_op("div", _div_fwd, _div_adj)
ln = register_op("ln", _ln_fwd, _ln_adj)
exp = register_op("exp", _exp_fwd, _exp_adj)
logistic = register_op("logistic", _logistic_fwd, _logistic_adj)
leaky_relu = register_op("leaky_relu", _leaky_fwd, _leaky_adj)
minimum = register_op("minimum", _min_fwd, _minmax_adj)
maximum = register_op("maximum", _max_fwd, _minmax_adj)
clip = register_op("clip", _clip_fwd, _clip_adj)
sum_ = register_op("sum", _sum_fwd, _sum_adj)
mean = register_op("mean", _mean_fwd, _mean_adj)
spatial_sum = register_op("spatial_sum", _spatial_sum_fwd, _spatial_sum_adj)
spatial_mean = register_op("spatial_mean", _spatial_mean_fwd, _spatial_mean_adj)
reshape = register_op("reshape", _reshape_fwd, _reshape_adj)
transpose = register_op("transpose", _transpose_fwd, _transpose_adj)
gather = register_op("gather", _gather_fwd, _gather_adj)
conv2d = register_op("conv2d", _conv_fwd, _conv_adj)
