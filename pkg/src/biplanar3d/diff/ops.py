"""Differentiable array operations.

Layouts are channels-last throughout: 3D feature maps are (H, W, D, C) and
convolution kernels are (kh, kw, kd, C_in, C_out). Convolutions use
cross-correlation (no kernel flip) with zero padding; the output length per
axis is ``(n + 2 * padding - k) // stride + 1``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .. import _kernels
from .array import DiffArray, as_array, default_dtype, make_node


def _coerce(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    a = np.asarray(x)
    if like is not None and a.dtype.kind in "fiub" and like.dtype.kind == "f":
        a = a.astype(like.dtype, copy=False)
    return DiffArray(a)


def _pair(a, b):
    if isinstance(a, DiffArray):
        return a, _coerce(b, a)
    b = _coerce(b)
    return _coerce(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def parameter(value, name: str | None = None) -> DiffArray:
    return DiffArray(np.asarray(value, dtype=default_dtype()).copy(), True, name)


def constant(value) -> DiffArray:
    return DiffArray(np.asarray(value, dtype=default_dtype()))


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return make_node(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                     "mul")


def div(a, b) -> DiffArray:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / bv, av.shape),
                                _unbroadcast(-g * out / bv, bv.shape)), "div")


def neg(a) -> DiffArray:
    a = as_array(a)
    return make_node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, s: float) -> DiffArray:
    a = as_array(a)
    s = a.dtype.type(s) if a.dtype.kind == "f" else s
    return make_node(a.value * s, (a,), lambda g: (g * s,), "scale")


def exp(a) -> DiffArray:
    a = as_array(a)
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffArray:
    a = as_array(a)
    av = a.value
    return make_node(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a) -> DiffArray:
    a = as_array(a)
    av = a.value
    return make_node(av * av, (a,), lambda g: (2 * g * av,), "square")


def clamp_min(a, lo: float) -> DiffArray:
    a = as_array(a)
    av = a.value
    keep = av > lo
    return make_node(np.maximum(av, lo).astype(av.dtype), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a) -> DiffArray:
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope: float = 0.01) -> DiffArray:
    a = as_array(a)
    av = a.value
    pos = av > 0
    s = av.dtype.type(slope)
    return make_node(np.where(pos, av, av * s), (a,), lambda g: (np.where(pos, g, g * s),),
                     "leaky_relu")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> DiffArray:
    """Exact (erf) GELU."""
    a = as_array(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make_node(out, (a,), bwd, "gelu")


# -- reductions & shape ----------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001
    a = as_array(a)
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_array(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> DiffArray:
    a = as_array(a)
    old = a.shape
    return make_node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> DiffArray:
    a = as_array(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> DiffArray:
    a = as_array(a)
    old = a.shape
    return make_node(np.broadcast_to(a.value, shape), (a,),
                     lambda g: (_unbroadcast(g, old),), "broadcast")


def broadcast_along_axis(a, axis: int, size: int) -> DiffArray:
    """Insert a new axis at ``axis`` and replicate ``size`` times along it."""
    a = as_array(a)
    expanded = np.expand_dims(a.value, axis)
    shape = list(expanded.shape)
    shape[axis] = size
    return make_node(np.broadcast_to(expanded, shape), (a,),
                     lambda g: (g.sum(axis=axis),), "broadcast_axis")


def getitem(a, idx) -> DiffArray:
    a = as_array(a)
    shape, dtype = a.shape, a.dtype
    basic = not _is_advanced(idx)

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_node(a.value[idx], (a,), bwd, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(arrays, axis: int = -1) -> DiffArray:
    arrays = [as_array(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(arrays)))

    return make_node(np.concatenate([x.value for x in arrays], axis=axis), tuple(arrays), bwd,
                     "concat")


def split(a, sizes, axis: int = -1) -> list[DiffArray]:
    a = as_array(a)
    ax = axis % a.ndim
    out, start = [], 0
    for n in sizes:
        idx = tuple([slice(None)] * ax + [slice(start, start + n)])
        out.append(getitem(a, idx))
        start += n
    if start != a.shape[ax]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.shape[ax]}")
    return out


def pad(a, widths) -> DiffArray:
    """Zero padding; ``widths`` as in ``np.pad``."""
    a = as_array(a)
    widths = [tuple(w) for w in widths]
    if all(w == (0, 0) for w in widths):
        return a
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_node(np.pad(a.value, widths), (a,), lambda g: (g[sl],), "pad")


def roll(a, shift, axis) -> DiffArray:
    a = as_array(a)
    back = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return make_node(np.roll(a.value, shift, axis), (a,), lambda g: (np.roll(g, back, axis),),
                     "roll")


def take(table, index: np.ndarray) -> DiffArray:
    """Gather rows of ``table`` (axis 0) with an integer index array."""
    table = as_array(table)
    index = np.asarray(index)
    shape, dtype = table.shape, table.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_node(table.value[index], (table,), bwd, "take")


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return make_node(av @ bv, (a, b), bwd, "matmul")


def linear(x, w, b=None) -> DiffArray:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation and attention -------------------------------------------------

def softmax(a, axis: int = -1) -> DiffArray:
    a = as_array(a)
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bwd, "softmax")


def _normalize(x: np.ndarray, axes, eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _norm_op(a, gain, bias, axes, eps, op):
    a = as_array(a)
    gain, bias = _coerce(gain, a), _coerce(bias, a)
    xhat, inv = _normalize(a.value, axes, eps)
    xhat = xhat.astype(a.dtype, copy=False)
    gv = gain.value
    red = tuple(i for i in range(a.ndim) if i != a.ndim - 1)

    def bwd(g):
        gx = gxhat = g * gv
        if a.requires_grad:
            m1 = gxhat.mean(axis=axes, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
            gx = (inv * (gxhat - m1 - xhat * m2)).astype(a.dtype, copy=False)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(xhat * gv + bias.value, (a, gain, bias), bwd, op)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Normalise the last axis to zero mean / unit (population) variance, then affine."""
    return _norm_op(a, gain, bias, -1, eps, "layer_norm")


def instance_norm(a, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Per-channel normalisation over all spatial axes of a channels-last map."""
    a = as_array(a)
    return _norm_op(a, gain, bias, tuple(range(a.ndim - 1)), eps, "instance_norm")


# -- convolution -----------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def conv3d(x, w, b=None, stride: int = 1, padding: int = 0) -> DiffArray:
    """3D cross-correlation of an (H, W, D, Ci) map with a (k, k, k, Ci, Co) kernel."""
    x = as_array(x)
    w = _coerce(w, x)
    xv, wv = x.value, w.value
    kh, kw, kd, ci, co = wv.shape
    if xv.shape[-1] != ci:
        raise ValueError(f"conv3d channel mismatch: input {xv.shape[-1]}, kernel {ci}")
    if (kh, kw, kd) == (1, 1, 1) and padding == 0:
        out = _pointwise(x, w, stride)
    else:
        xpad = np.pad(xv, [(padding, padding)] * 3 + [(0, 0)])
        cols = _kernels.im2col3d(np.ascontiguousarray(xpad), (kh, kw, kd), stride)
        oshape = cols.shape[:3]
        cols2 = cols.reshape(-1, cols.shape[-1])
        wmat = wv.reshape(-1, co)

        def bwd(g):
            g2 = g.reshape(-1, co)
            gx = None
            if x.requires_grad:
                gcols = (g2 @ wmat.T).reshape(*oshape, -1)
                gpad = _kernels.col2im3d(gcols, xpad.shape, (kh, kw, kd), stride)
                sl = tuple(slice(padding, padding + n) for n in xv.shape[:3])
                gx = gpad[sl]
            gw = (cols2.T @ g2).reshape(wv.shape) if w.requires_grad else None
            return gx, gw

        out = make_node((cols2 @ wmat).reshape(*oshape, co), (x, w), bwd, "conv3d")
    return out if b is None else add(out, b)


def _pointwise(x: DiffArray, w: DiffArray, stride: int) -> DiffArray:
    xv = x.value
    ci, co = w.shape[-2:]
    xs = xv[::stride, ::stride, ::stride] if stride > 1 else xv
    wmat = w.value.reshape(ci, co)
    xs2 = xs.reshape(-1, ci)

    def bwd(g):
        g2 = g.reshape(-1, co)
        gx = None
        if x.requires_grad:
            gxs = (g2 @ wmat.T).reshape(xs.shape)
            if stride > 1:
                gx = np.zeros_like(xv)
                gx[::stride, ::stride, ::stride] = gxs
            else:
                gx = gxs
        gw = (xs2.T @ g2).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return make_node((xs2 @ wmat).reshape(*xs.shape[:3], co), (x, w), bwd, "conv3d")


def conv3d_transpose(x, w, b=None, stride: int = 1, padding: int = 0) -> DiffArray:
    """Adjoint of ``conv3d``: maps (h, w, d, Ci) to (H, W, D, Co) with a (k, k, k, Ci, Co) kernel.

    Output length per axis is ``(n - 1) * stride - 2 * padding + k``.
    """
    x = as_array(x)
    w = _coerce(w, x)
    xv, wv = x.value, w.value
    kh, kw, kd, ci, co = wv.shape
    if xv.shape[-1] != ci:
        raise ValueError(f"conv3d_transpose channel mismatch: input {xv.shape[-1]}, kernel {ci}")
    full = tuple((n - 1) * stride + k for n, k in zip(xv.shape[:3], (kh, kw, kd)))
    wmat = np.ascontiguousarray(wv.transpose(3, 0, 1, 2, 4)).reshape(ci, -1)
    x2 = xv.reshape(-1, ci)
    cols = (x2 @ wmat).reshape(*xv.shape[:3], -1)
    outpad = _kernels.col2im3d(np.ascontiguousarray(cols), full + (co,), (kh, kw, kd), stride)
    sl = tuple(slice(padding, n - padding) for n in full)
    out = outpad[sl]

    def bwd(g):
        gpad = np.zeros(full + (co,), dtype=g.dtype)
        gpad[sl] = g
        gcols = _kernels.im2col3d(gpad, (kh, kw, kd), stride).reshape(-1, wmat.shape[1])
        gx = (gcols @ wmat.T).reshape(xv.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (x2.T @ gcols).reshape(ci, kh, kw, kd, co).transpose(1, 2, 3, 0, 4)
        return gx, gw

    out = make_node(np.ascontiguousarray(out), (x, w), bwd, "conv3d_transpose")
    return out if b is None else add(out, b)


# -- operator overloading ----------------------------------------------------------

DiffArray.__add__ = lambda s, o: add(s, o)
DiffArray.__radd__ = lambda s, o: add(o, s)
DiffArray.__sub__ = lambda s, o: sub(s, o)
DiffArray.__rsub__ = lambda s, o: sub(o, s)
DiffArray.__mul__ = lambda s, o: mul(s, o)
DiffArray.__rmul__ = lambda s, o: mul(o, s)
DiffArray.__truediv__ = lambda s, o: div(s, o)
DiffArray.__rtruediv__ = lambda s, o: div(o, s)
DiffArray.__neg__ = lambda s: neg(s)
DiffArray.__matmul__ = lambda s, o: matmul(s, o)
DiffArray.__rmatmul__ = lambda s, o: matmul(o, s)
DiffArray.__getitem__ = lambda s, i: getitem(s, i)
DiffArray.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 else shape)
DiffArray.transpose = lambda s, *axes: transpose(s, axes[0] if len(axes) == 1 else axes)
DiffArray.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
DiffArray.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
