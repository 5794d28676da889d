"""Differentiable operations over :class:`~vitfuse.core.tensor.Tensor`.

Every function returns a new Tensor and registers an analytic
vector-Jacobian product. Layout conventions are fixed package-wide:
row-major elements, NCHW feature maps, and row-major spatial order for
token flattening (row index varies slowest).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, result_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return result_tensor(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return result_tensor(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return result_tensor(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return result_tensor(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return result_tensor(-a.data, (a,), vjp)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return result_tensor(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return result_tensor(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return result_tensor(out, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * ~mask, b.data.shape),
        )

    return result_tensor(out, (a, b), vjp)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * ~mask, b.data.shape),
        )

    return result_tensor(out, (a, b), vjp)


# ----------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)

    return result_tensor(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return result_tensor(out, (a,), vjp)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return result_tensor(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return result_tensor(out, (a,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross entropy on raw logits (numerically stable)."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        return (g * (_stable_sigmoid(z) - t),)

    return result_tensor(out, (logits,), vjp)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dimensions must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul batch dims differ: {a.data.shape[:-2]} vs {b.data.shape[:-2]}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return (
            g @ b.data.swapaxes(-1, -2),
            a.data.swapaxes(-1, -2) @ g,
        )

    return result_tensor(out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: ``y = x @ weight.T + bias``.

    weight has shape (Dout, Din); x may carry any leading dimensions.
    """
    din = x.data.shape[-1]
    if weight.data.ndim != 2 or weight.data.shape[1] != din:
        raise ShapeError(
            f"linear: input width {din} does not match weight {weight.data.shape}"
        )
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(
            f"linear: bias shape {bias.data.shape} does not match Dout {weight.data.shape[0]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, din)
        dx = (g @ weight.data).reshape(x.data.shape)
        dw = g2.T @ x2
        db = g2.sum(axis=0) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return result_tensor(out, parents, vjp)


# ----------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of NCHW input with an (O, C, kh, kw) kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.data.shape}")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if c != ck:
        raise ShapeError(
            f"conv2d: input has {c} channels but kernel expects {ck}"
        )
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} padding={padding}")
    for name, extent, k in (("height", h, kh), ("width", w, kw)):
        span = extent + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ConfigError(
                f"conv2d: output {name} (({extent} + 2*{padding} - {k})/{stride} + 1) "
                "is not a positive integer"
            )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: (N*Ho*Wo, C*kh*kw) against (O, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
    k2 = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ k2.T).reshape(n, h_out, w_out, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        gcols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            n * h_out * w_out, o
        )
        dk = (gcols.T @ cols).reshape(o, c, kh, kw)
        dcols = gcols @ k2
        dwin = dcols.reshape(n, h_out, w_out, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(
            (n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype
        )
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :,
                    :,
                    i : i + stride * h_out : stride,
                    j : j + stride * w_out : stride,
                ] += dwin[:, :, :, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return result_tensor(out, parents, vjp)


# ----------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance normalization over the trailing axis, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or offset.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/offset must have shape ({d},), got "
            f"{gain.data.shape}/{offset.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + offset.data

    def vjp(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        doffset = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, doffset

    return result_tensor(out, (x, gain, offset), vjp)


# ----------------------------------------------------------------------
# spatial / structural


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; gradient sums the replicas."""
    if factor < 1:
        raise ConfigError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NCHW input, got {x.data.shape}")
    if factor == 1:
        out = x.data.copy()
    else:
        out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.data.shape

    def vjp(g):
        if factor == 1:
            return (g,)
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return result_tensor(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return result_tensor(out, tensors, vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return result_tensor(out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return result_tensor(out, (x,), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads the complement."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return result_tensor(out, (x,), vjp)


def tokens_from_map(x: Tensor) -> Tensor:
    """(N, C, S, S) feature map -> (N, S*S, C) tokens, row-major spatial order."""
    if x.data.ndim != 4 or x.data.shape[2] != x.data.shape[3]:
        raise ShapeError(f"tokens_from_map expects a square NCSS map, got {x.data.shape}")
    n, c, s, _ = x.data.shape
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n, s * s, c)

    def vjp(g):
        return (np.ascontiguousarray(g.reshape(n, s, s, c).transpose(0, 3, 1, 2)),)

    return result_tensor(out, (x,), vjp)


def map_from_tokens(tokens: Tensor, side: int) -> Tensor:
    """Inverse of tokens_from_map: (N, S*S, C) -> (N, C, S, S)."""
    if tokens.data.ndim != 3:
        raise ShapeError(f"map_from_tokens expects (N, T, C) tokens, got {tokens.data.shape}")
    n, t, c = tokens.data.shape
    if t != side * side:
        raise ShapeError(f"map_from_tokens: token count {t} != side^2 = {side * side}")
    out = np.ascontiguousarray(
        tokens.data.reshape(n, side, side, c).transpose(0, 3, 1, 2)
    )

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, t, c),)

    return result_tensor(out, (tokens,), vjp)


# ----------------------------------------------------------------------
# attention


def multi_head_self_attention(
    tokens: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: int,
) -> Tensor:
    """Standard multi-head self-attention over (N, T, D) tokens.

    Per head: softmax(Q K^T / sqrt(D/heads)) V; heads are concatenated and
    passed through the output projection. Built from differentiable
    primitives, so gradients flow to every projection and to the tokens.
    """
    n, t, d = tokens.data.shape
    if d % heads != 0:
        raise ConfigError(f"attention: heads={heads} does not divide width {d}")
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        return transpose(reshape(x, (n, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(tokens, wq, bq))
    k = split(linear(tokens, wk, bk))
    v = split(linear(tokens, wv, bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v)  # (N, heads, T, dh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    return linear(merged, wo, bo)
