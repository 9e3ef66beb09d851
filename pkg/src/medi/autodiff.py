"""Reverse-mode automatic differentiation over numpy arrays.

A small tape. Every operation records vector-Jacobian closures that are
themselves written in terms of these same operations, so ``grad`` called
with ``create_graph=True`` returns gradients that can be differentiated
again. That second pass is what lets a meta-update flow through an inner
gradient-descent step without any finite-difference shortcuts.

Float64 throughout unless a leaf is explicitly float32.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False, parents=(), vjps=()):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, links):
    """Create a result tensor, tracking only parents that require grad."""
    if _GRAD_ENABLED[-1]:
        tracked = [(p, v) for p, v in links if p.requires_grad]
        if tracked:
            return Tensor(
                data,
                requires_grad=True,
                parents=tuple(p for p, _ in tracked),
                vjps=tuple(v for _, v in tracked),
            )
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (differentiably)."""
    t = g
    while t.data.ndim > len(shape):
        t = tsum(t, axis=0)
    axes = tuple(
        i for i, s in enumerate(shape) if s == 1 and t.data.shape[i] != 1
    )
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.data.shape != tuple(shape):
        t = reshape(t, shape)
    return t


def add(a, b):
    a, b = astensor(a), astensor(b)
    return _node(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b):
    a, b = astensor(a), astensor(b)
    return _node(
        a.data - b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(neg(g), b.data.shape)),
        ],
    )


def neg(a):
    a = astensor(a)
    return _node(-a.data, [(a, lambda g: neg(g))])


def mul(a, b):
    a, b = astensor(a), astensor(b)
    return _node(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(mul(g, b), a.data.shape)),
            (b, lambda g: _unbroadcast(mul(g, a), b.data.shape)),
        ],
    )


def div(a, b):
    a, b = astensor(a), astensor(b)
    return _node(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(div(g, b), a.data.shape)),
            (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)),
        ],
    )


def power(a, p):
    """Elementwise a**p for a python scalar exponent p."""
    a = astensor(a)
    p = float(p)
    if p == 0.0:
        return _node(np.ones_like(a.data), [(a, lambda g: mul(g, Tensor(0.0)))])
    return _node(
        a.data ** p,
        [(a, lambda g: mul(g, mul(Tensor(p), power(a, p - 1.0))))],
    )


def sqrt(a):
    return power(a, 0.5)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    return _node(
        a.data @ b.data,
        [
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        ],
    )


def transpose(a):
    a = astensor(a)
    return _node(a.data.T, [(a, lambda g: transpose(g))])


def reshape(a, shape):
    a = astensor(a)
    shape = tuple(shape)
    old = a.data.shape
    return _node(a.data.reshape(shape), [(a, lambda g: reshape(g, old))])


def broadcast_to(a, shape):
    a = astensor(a)
    shape = tuple(shape)
    old = a.data.shape
    return _node(
        np.broadcast_to(a.data, shape).copy(),
        [(a, lambda g: _unbroadcast(g, old))],
    )


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    in_shape = a.data.shape

    def vjp(g):
        if axis is None:
            kept = (1,) * len(in_shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(in_shape) for ax in axes)
            if keepdims:
                kept = g.data.shape
            else:
                kept = tuple(
                    1 if i in axes else s for i, s in enumerate(in_shape)
                )
        return broadcast_to(reshape(g, kept), in_shape)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return div(tsum(a, axis=axis, keepdims=keepdims), Tensor(float(n)))


def exp(a):
    a = astensor(a)
    out = _node(np.exp(a.data), [(a, None)])
    if out.requires_grad:
        out._vjps = (lambda g: mul(g, out),)
    return out


def log(a):
    a = astensor(a)
    return _node(np.log(a.data), [(a, lambda g: div(g, a))])


def tanh(a):
    a = astensor(a)
    out = _node(np.tanh(a.data), [(a, None)])
    if out.requires_grad:
        out._vjps = (lambda g: mul(g, sub(Tensor(1.0), mul(out, out))),)
    return out


def relu(a):
    a = astensor(a)
    mask = Tensor((a.data > 0).astype(a.data.dtype))
    return _node(a.data * mask.data, [(a, lambda g: mul(g, mask))])


def absolute(a):
    a = astensor(a)
    sgn = Tensor(np.sign(a.data))
    return _node(np.abs(a.data), [(a, lambda g: mul(g, sgn))])


def clip(a, lo, hi):
    """Clamp with a pass-through gradient strictly inside (lo, hi)."""
    a = astensor(a)
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(a.data.dtype))
    return _node(np.clip(a.data, lo, hi), [(a, lambda g: mul(g, mask))])


def amax(a, axis, keepdims=True):
    """Max over ``axis``; gradient split evenly across ties (constant mask)."""
    a = astensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    hits = (a.data == m).astype(a.data.dtype)
    mask = Tensor(hits / hits.sum(axis=axis, keepdims=True))
    out = m if keepdims else m.squeeze(axis)
    kept_shape = m.shape

    def vjp(g):
        return mul(broadcast_to(reshape(g, kept_shape), a.data.shape), mask)

    return _node(out, [(a, vjp)])


def softmax(a, axis=-1):
    z = sub(a, amax(a, axis=axis, keepdims=True))
    e = exp(z)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    z = sub(a, amax(a, axis=axis, keepdims=True))
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(output, inputs, create_graph=False):
    """d(output)/d(input) for a scalar output tensor.

    With ``create_graph=True`` the returned gradients stay connected to the
    graph and can be differentiated once more.
    """
    if output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    if not np.isfinite(output.data).all():
        raise NumericError(f"non-finite loss value {output.data!r}")
    inputs = list(inputs)
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]

    order = _toposort(output)
    adjoint = {id(output): Tensor(np.ones_like(output.data))}
    wanted = {id(t) for t in inputs}

    ctx = no_grad() if not create_graph else _nullcontext()
    with ctx:
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                adjoint[id(node)] = g  # keep requested adjoints around
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = contrib if prev is None else add(prev, contrib)

    return [
        adjoint.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs
    ]


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def finite_difference(f, x, step=1e-5, coords=None):
    """Central-difference gradient of ``f`` at flat vector ``x``.

    Independent of the tape; used as the oracle in gradient checks.
    ``coords`` limits evaluation to selected flat indices.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = range(x.size) if coords is None else coords
    out = np.zeros(x.size)
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (f(xp) - f(xm)) / (2.0 * step)
    return out
