"""Differentiable dense ops.

Every op takes Tensors (or array-likes, treated as constants), computes the
forward value with numpy and records a closure returning the input
gradients. Elementwise binary ops follow numpy broadcasting, restricted to
expansion of size-1 (or missing leading) axes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from featfield.diffengine.tensor import Tensor, record
from featfield.errors import ShapeMismatch

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "sigmoid", "exp", "log",
    "sum", "mean", "square", "sqrt", "concat", "slice", "broadcast", "l2_norm",
    "softplus", "reshape", "transpose", "cumsum", "conv2d", "sparse_matmul",
    "as_tensor",
]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand so f32 graphs stay f32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {sa} and {sb}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def broadcast(a, shape: Sequence[int]) -> Tensor:
    """Expand ``a`` to ``shape``; only size-1 or missing leading axes may grow."""
    a = as_tensor(a)
    shape = tuple(shape)
    if _broadcast_shape("broadcast", a.shape, shape) != shape:
        raise ShapeMismatch(f"broadcast: cannot expand {a.shape} to {shape}")
    sa = a.shape
    return record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, sa),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return record(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return record(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(a.data, np.zeros((), dtype=a.dtype))
    return record(out, (a,), lambda g: (g * expit(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    sa = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g, sa)),)

    return record(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def l2_norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    a = as_tensor(a)
    ad = a.data
    nrm = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1)
        return (g * ad / safe,)

    out = nrm if keepdims else np.squeeze(nrm, axis=axis)
    return record(out, (a,), fn)


def _shift_forward(x: np.ndarray, axis: int) -> np.ndarray:
    """Shift by one along ``axis``, dropping the last entry and inserting zero first."""
    out = np.zeros_like(x)
    src = [np.s_[:]] * x.ndim
    dst = [np.s_[:]] * x.ndim
    src[axis] = np.s_[:-1]
    dst[axis] = np.s_[1:]
    out[tuple(dst)] = x[tuple(src)]
    return out


def _shift_backward(x: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(x)
    src = [np.s_[:]] * x.ndim
    dst = [np.s_[:]] * x.ndim
    src[axis] = np.s_[1:]
    dst[axis] = np.s_[:-1]
    out[tuple(dst)] = x[tuple(src)]
    return out


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum along ``axis``; ``exclusive`` shifts so element i sums j < i."""
    a = as_tensor(a)
    ax = axis % a.ndim
    out = np.cumsum(a.data, axis=ax)
    if exclusive:
        out = _shift_forward(out, ax)

    def fn(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=ax), axis=ax), axis=ax)
        return (_shift_backward(rev, ax) if exclusive else rev,)

    return record(out, (a,), fn)


# ---------------------------------------------------------------- structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot reshape {sa} to {tuple(shape)}") from None
    return record(out, (a,), lambda g: (g.reshape(sa),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat: empty input list")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeMismatch(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    dtype = np.result_type(*[t.dtype for t in ts])
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in ts], axis=ax)
    return record(out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic or advanced indexing; the gradient scatters back (with accumulation)."""
    a = as_tensor(a)
    sa, dt = a.shape, a.dtype
    out = a.data[index]

    def fn(g):
        full = np.zeros(sa, dtype=dt)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out, copy=True), (a,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # single rows or columns go through gemv, whose rounding differs from
    # gemm; pad to two so one-at-a-time evaluation is bitwise equal to batched.
    pa, pb = ad.shape[0] == 1, bd.shape[1] == 1
    out = (np.concatenate([ad, ad]) if pa else ad) @ (np.concatenate([bd, bd], 1) if pb else bd)
    if pa:
        out = out[:1]
    if pb:
        out = np.ascontiguousarray(out[:, :1])

    def fn(g):
        g = np.ascontiguousarray(g)
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return record(out, (a, b), fn)


def sparse_matmul(m: sparse.spmatrix, a) -> Tensor:
    """Constant sparse matrix times dense tensor: ``m @ a`` with ``a`` of shape (K, C)."""
    a = as_tensor(a)
    if a.ndim != 2 or m.shape[1] != a.shape[0]:
        raise ShapeMismatch(f"sparse_matmul: incompatible shapes {m.shape} and {a.shape}")
    m = sparse.csr_matrix(m, dtype=a.dtype)
    out = np.asarray(m @ a.data)
    return record(out, (a,), lambda g: (np.asarray(m.T @ g),))


def conv2d(x, w, stride: int = 1, padding: int = 1) -> Tensor:
    """NHWC convolution. ``x``: (B, H, W, Cin); ``w``: (k, k, Cin, Cout)."""
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3] or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, H, W, Cin = x.shape
    k, _, _, Cout = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (B, Hp-k+1, Wp-k+1, Cin, k, k) -> strided output positions
    win = win[:, : stride * Ho : stride, : stride * Wo : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * Cin)
    wmat = w.data.reshape(k * k * Cin, Cout)
    out = (cols @ wmat).reshape(B, Ho, Wo, Cout)

    def fn(g):
        g2 = np.ascontiguousarray(g).reshape(B * Ho * Wo, Cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, k, k, Cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, padding : padding + H, padding : padding + W]
        return gx, gw

    return record(out, (x, w), fn)
