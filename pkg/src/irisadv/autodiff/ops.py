"""Differentiable operations over NCHW tensors.

Every op takes :class:`Tensor` inputs, computes its output eagerly with numpy
and, when any input requires gradients, records a closure mapping the
upstream gradient to one gradient per input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node

Padding = int | tuple[int, int, int, int]


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(name, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """``scale * x + shift`` with constant scalars."""
    return make_node(x.data * scale + shift, (x,), lambda g: (g * scale,), "affine")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return make_node(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def l2_norm(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Euclidean norm over ``axes`` (all axes when None).

    The gradient at a zero vector is taken as zero.
    """
    if axes is None:
        axes = tuple(range(x.data.ndim))
    n = np.sqrt(np.sum(x.data * x.data, axis=axes, keepdims=True))

    def bw(g):
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, x.data / safe, 0) * g.reshape(n.shape),)

    out_shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
    return make_node(n.reshape(out_shape).astype(x.dtype), (x,), bw, "l2_norm")


def mean(x: Tensor) -> Tensor:
    k = x.size
    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.full(x.shape, g / k, dtype=x.dtype),), "mean")


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Depth concatenation (channel axis 1 for NCHW)."""
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.data.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, x.shape)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_node(np.concatenate([x.data for x in xs], axis=axis), xs,
                     lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two on both spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2x", x.shape, ("N", "C", "H", "W"))
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(y, (x,), bw, "upsample2x")


# ---------------------------------------------------------------- convolution


def pad2d(x: Tensor, pads: Padding, wrap_width: bool = False) -> Tensor:
    """Zero-pad the spatial axes of an NCHW tensor; optionally wrap along width.

    Wrapping treats the width axis as periodic, as for angular samples.
    """
    if x.data.ndim != 4:
        raise ShapeError("pad2d", x.shape, ("N", "C", "H", "W"))
    top, bottom, left, right = _pads(pads)
    w = x.shape[3]
    if wrap_width and max(left, right) > w:
        raise ShapeError("pad2d", x.shape, detail=f"cannot wrap {max(left, right)} columns of {w}")
    y = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (0, 0)))
    if wrap_width:
        y = np.concatenate([y[..., w - left:], y, y[..., :right]], axis=3)
    else:
        y = np.pad(y, ((0, 0), (0, 0), (0, 0), (left, right)))

    def bw(g):
        g = g[:, :, top:g.shape[2] - bottom]
        inner = g[..., left:left + w].copy()
        if wrap_width:
            if left:
                inner[..., w - left:] += g[..., :left]
            if right:
                inner[..., :right] += g[..., left + w:]
        return (inner,)

    return make_node(y, (x,), bw, "pad2d")



def _pads(padding: Padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding, padding, padding, padding)
    top, bottom, left, right = padding
    return (top, bottom, left, right)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pads):
    top, bottom, left, right = pads
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp.shape, win


def _scatter_windows(gwin: np.ndarray, padded_shape, stride: int, pads) -> np.ndarray:
    """Adjoint of :func:`_windows`: fold (N,C,Ho,Wo,kh,kw) back onto the input."""
    n, c, ho, wo, kh, kw = gwin.shape
    gxp = np.zeros(padded_shape, dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[..., i, j]
    top, bottom, left, right = pads
    return gxp[:, :, top:padded_shape[2] - bottom, left:padded_shape[3] - right]


def _out_extent(name, size, k, stride, before, after, shapes):
    span = size + before + after - k
    if span < 0:
        raise ShapeError(name, *shapes, detail="kernel larger than padded input")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: Padding = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a (Cout, Cin, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    pads = _pads(padding)
    cout, cin, kh, kw = w.shape
    _out_extent("conv2d", x.shape[2], kh, stride, pads[0], pads[1], (x.shape, w.shape))
    _out_extent("conv2d", x.shape[3], kw, stride, pads[2], pads[3], (x.shape, w.shape))
    padded_shape, win = _windows(x.data, kh, kw, stride, pads)
    # (N, Ho, Wo, Cout) -> NCHW
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.tensordot(g, w.data, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
            gx = _scatter_windows(gwin.transpose(0, 3, 1, 2, 4, 5), padded_shape, stride, pads)
        return gx, gw

    return make_node(np.ascontiguousarray(y), (x, w), bw, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: Padding = 0) -> Tensor:
    """Per-channel cross-correlation with a (C, 1, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1] != 1 or x.shape[1] != w.shape[0]:
        raise ShapeError("depthwise_conv2d", x.shape, w.shape)
    pads = _pads(padding)
    _, _, kh, kw = w.shape
    _out_extent("depthwise_conv2d", x.shape[2], kh, stride, pads[0], pads[1], (x.shape, w.shape))
    _out_extent("depthwise_conv2d", x.shape[3], kw, stride, pads[2], pads[3], (x.shape, w.shape))
    top, bottom, left, right = pads
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    k = w.data[:, 0]

    def tap(i, j):
        return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    # one strided slice per kernel tap keeps memory at the size of the output
    y = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x.data, k))
    for i in range(kh):
        for j in range(kw):
            y += xp[tap(i, j)] * k[None, :, i, j, None, None]

    def bw(g):
        gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[tap(i, j)])
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += g * k[None, :, i, j, None, None]
            gx = gxp[:, :, top:xp.shape[2] - bottom, left:xp.shape[3] - right]
        return gx, gw

    return make_node(y, (x, w), bw, "depthwise_conv2d")


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor,
                     stride: int = 1, padding: Padding = 0) -> Tensor:
    """Depthwise k x k filtering followed by 1 x 1 channel mixing."""
    return conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               training: bool) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    Training mode normalises with batch statistics and updates the running
    estimates in ``stats``; eval mode uses the running estimates only.
    """
    c = x.shape[1] if x.data.ndim == 4 else -1
    if x.data.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", x.shape, gamma.shape, beta.shape)
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        stats.running_mean = ((1 - stats.momentum) * stats.running_mean
                              + stats.momentum * mu).astype(stats.running_mean.dtype)
        stats.running_var = ((1 - stats.momentum) * stats.running_var
                             + stats.momentum * unbiased).astype(stats.running_var.dtype)
    else:
        mu = stats.running_mean.astype(x.dtype)
        var = stats.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // c
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx.astype(x.dtype), gg.astype(gamma.dtype), gb.astype(beta.dtype)

    return make_node(y.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------- dispatch


_LAYERS = {
    "conv2d": lambda x, p, a: conv2d(x, p[0], a.get("stride", 1), a.get("padding", 0)),
    "depthwise_conv2d": lambda x, p, a: depthwise_conv2d(x, p[0], a.get("stride", 1), a.get("padding", 0)),
    "separable_conv2d": lambda x, p, a: separable_conv2d(x, p[0], p[1], a.get("stride", 1), a.get("padding", 0)),
    "upsample2x": lambda x, p, a: upsample2x(x),
    "pad2d": lambda x, p, a: pad2d(x, a.get("pads", 0), a.get("wrap_width", False)),
    "batch_norm": lambda x, p, a: batch_norm(x, p[0], p[1], a["stats"], a.get("training", False)),
    "relu": lambda x, p, a: relu(x),
    "tanh": lambda x, p, a: tanh(x),
    "concat": lambda x, p, a: concat([x, *p], a.get("axis", 1)),
    "reshape": lambda x, p, a: reshape(x, a["shape"]),
    "l2_norm": lambda x, p, a: l2_norm(x, a.get("axes")),
    "sub": lambda x, p, a: sub(x, p[0]),
    "mul": lambda x, p, a: mul(x, p[0]),
}

_N_PARAMS = {"conv2d": 1, "depthwise_conv2d": 1, "separable_conv2d": 2, "batch_norm": 2,
             "sub": 1, "mul": 1}

LAYER_KINDS = tuple(_LAYERS)


def layer_forward(kind: str, x: Tensor, params: Sequence[Tensor] = (), **attrs) -> Tensor:
    """Apply the layer ``kind`` to ``x`` by name."""
    try:
        fn = _LAYERS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}") from None
    need = _N_PARAMS.get(kind, 0)
    if len(params) < need:
        raise ValueError(f"{kind} needs {need} parameter tensor(s), got {len(params)}")
    return fn(as_tensor(x), list(params), attrs)
