"""Minimal reverse-mode autodiff over numpy arrays.

The training path needs exact control over which sites use straight-through
gradients, so this is a small tape of composable ops rather than a framework
dependency.  Forward computations reuse the inference kernels where one
exists (softmax, valid-count pooling, half-away rounding) so the two paths
cannot drift apart numerically.
"""

from __future__ import annotations

import numpy as np

from ..attention import _softmax_rows
from ..layers import _avg_pool_axis
from ..quant import round_half_away


class Var:
    """A node in the computation graph: value, gradient slot, backward rule."""

    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


def _acc(var, g):
    # accumulation never mutates g in place; rules hand over fresh arrays
    var.grad = g if var.grad is None else var.grad + g


def backward(loss):
    """Run reverse accumulation from a scalar loss node."""
    if loss.value.shape != ():
        raise ValueError("backward expects a scalar loss")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


def unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def const(x):
    return Var(x)


def add(a, b):
    out = Var(a.value + b.value, (a, b))

    def bwd(g):
        _acc(a, unbroadcast(g, a.value.shape))
        _acc(b, unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def sub(a, b):
    out = Var(a.value - b.value, (a, b))

    def bwd(g):
        _acc(a, unbroadcast(g, a.value.shape))
        _acc(b, unbroadcast(-g, b.value.shape))

    out.bwd = bwd
    return out


def mul(a, b):
    out = Var(a.value * b.value, (a, b))

    def bwd(g):
        _acc(a, unbroadcast(g * b.value, a.value.shape))
        _acc(b, unbroadcast(g * a.value, b.value.shape))

    out.bwd = bwd
    return out


def div(a, b):
    out = Var(a.value / b.value, (a, b))

    def bwd(g):
        _acc(a, unbroadcast(g / b.value, a.value.shape))
        _acc(b, unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out.bwd = bwd
    return out


def scale(a, c):
    """Multiply by a python scalar constant."""
    out = Var(a.value * c, (a,))

    def bwd(g):
        _acc(a, g * c)

    out.bwd = bwd
    return out


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    out = Var(np.matmul(a.value, b.value), (a, b))

    def bwd(g):
        ga = np.matmul(g, _swap_last(b.value))
        gb = np.matmul(_swap_last(a.value), g)
        _acc(a, unbroadcast(ga, a.value.shape))
        _acc(b, unbroadcast(gb, b.value.shape))

    out.bwd = bwd
    return out


def reshape(a, shape):
    out = Var(a.value.reshape(shape), (a,))

    def bwd(g):
        _acc(a, g.reshape(a.value.shape))

    out.bwd = bwd
    return out


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Var(np.transpose(a.value, axes), (a,))

    def bwd(g):
        _acc(a, np.transpose(g, inverse))

    out.bwd = bwd
    return out


def vsum(a, axis=None, keepdims=False):
    out = Var(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, a.value.shape).copy())

    out.bwd = bwd
    return out


def vmean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else _axis_count(a.value.shape, axis)
    return scale(vsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def sqrt(a):
    root = np.sqrt(a.value)
    out = Var(root, (a,))

    def bwd(g):
        _acc(a, g * (0.5 / root))

    out.bwd = bwd
    return out


def sign_ste(a, surrogate):
    """Sign with a straight-through gradient gated to |x| <= 1.

    surrogate=True replaces the hard sign by clip(x, -1, 1) in the forward
    pass, which has the gated identity as its true derivative away from the
    clip corners.  Both modes share the same backward rule.
    """
    if surrogate:
        value = np.clip(a.value, -1.0, 1.0)
    else:
        value = np.where(a.value >= 0, 1.0, -1.0).astype(a.value.dtype)
    gate = (np.abs(a.value) <= 1.0).astype(a.value.dtype)
    out = Var(value, (a,))

    def bwd(g):
        _acc(a, g * gate)

    out.bwd = bwd
    return out


def clip01(a):
    """Clamp to [0, 1]; gradient passes strictly inside the interval."""
    gate = ((a.value > 0.0) & (a.value < 1.0)).astype(a.value.dtype)
    out = Var(np.clip(a.value, 0.0, 1.0), (a,))

    def bwd(g):
        _acc(a, g * gate)

    out.bwd = bwd
    return out


def round_ste(a, surrogate):
    """Half-away-from-zero rounding passed through as identity in backward."""
    value = a.value if surrogate else round_half_away(a.value)
    out = Var(value, (a,))

    def bwd(g):
        _acc(a, g)

    out.bwd = bwd
    return out


def softmax_last(a):
    y = _softmax_rows(a.value)
    out = Var(y, (a,))

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _acc(a, y * (g - inner))

    out.bwd = bwd
    return out


def log_softmax_last(a):
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Var(shifted - lse, (a,))
    soft = np.exp(out.value)

    def bwd(g):
        _acc(a, g - soft * g.sum(axis=-1, keepdims=True))

    out.bwd = bwd
    return out


def avg_pool_axis_op(a, axis, size):
    """Stride-1 same-length average pool along one axis, valid counts only."""
    out = Var(_avg_pool_axis(a.value, axis, size), (a,))

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        n = moved.shape[0]
        pad = (size - 1) // 2
        cnt = np.zeros((n,) + (1,) * (moved.ndim - 1), dtype=g.dtype)
        for d in range(-pad, pad + 1):
            lo, hi = max(0, -d), n - max(0, d)
            if lo < hi:
                cnt[lo:hi] += 1
        weighted = moved / cnt
        acc = np.zeros_like(moved)
        # adjoint of the forward's shifted accumulation: offsets swap sides
        for d in range(-pad, pad + 1):
            lo, hi = max(0, -d), n - max(0, d)
            if lo < hi:
                acc[lo + d : hi + d] += weighted[lo:hi]
        _acc(a, np.moveaxis(acc, 0, axis))

    out.bwd = bwd
    return out


def upsample_tokens_op(a, grid, out_grid):
    """Nearest-neighbour token upsampling for batched [B, N, D] sequences."""
    sh, sw = grid
    oh, ow = out_grid
    batch, n, dim = a.value.shape
    if n != sh * sw:
        raise ValueError(f"token count {n} does not match grid {grid}")
    rows = np.arange(oh) * sh // oh
    cols = np.arange(ow) * sw // ow
    img = a.value.reshape(batch, sh, sw, dim)
    out_img = img[:, rows][:, :, cols]
    out = Var(out_img.reshape(batch, oh * ow, dim), (a,))

    def bwd(g):
        g_img = g.reshape(batch, oh, ow, dim)
        acc = np.zeros((batch, sh, sw, dim), dtype=g.dtype)
        flat_rows = np.repeat(rows, ow)
        flat_cols = np.tile(cols, oh)
        np.add.at(acc, (slice(None), flat_rows, flat_cols), g_img.reshape(batch, oh * ow, dim))
        _acc(a, acc.reshape(batch, sh * sw, dim))

    out.bwd = bwd
    return out
