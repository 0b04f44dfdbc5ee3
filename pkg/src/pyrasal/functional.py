"""Differentiable image and feature-map operations on :class:`Tensor`.

All spatial ops use NCHW layout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d cross-correlation.

    x: [N, C, H, W], weight: [F, C, kh, kw], bias: [F] or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d, got {x.shape}", dim="input")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got {weight.shape}", dim="kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = weight.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}", dim="C")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)", dim="F")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1, padding >= 0")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(w, kw, stride, padding, dilation)
    if ho < 1:
        raise ShapeError(f"conv2d: output height {ho} < 1", dim="H")
    if wo < 1:
        raise ShapeError(f"conv2d: output width {wo} < 1", dim="W")

    w2 = weight.data.reshape(f, c * kh * kw)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho * wo)
        out = np.matmul(w2, xs)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
        windows = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
        # im2col: [N, C*kh*kw, ho*wo]
        xs = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(w2, xs)
    out = out.reshape(n, f, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gx = gw = gb = None
        g3 = g.reshape(n, f, ho * wo)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if weight.requires_grad:
            gw = np.zeros((f, c * kh * kw), dtype=x.dtype)
            for i in range(n):
                gw += g3[i] @ xs[i].T
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)  # [N, C*kh*kw, ho*wo]
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride][:, :, :ho, :wo] = gcols.reshape(n, c, ho, wo)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                hp, wp = h + 2 * padding, w + 2 * padding
                gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        r0, c0 = i * dilation, j * dilation
                        gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                            c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def bilinear_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights ``[out_size, in_size]`` with half-pixel centres.

    Source coordinate is ``(dst + 0.5) * in/out - 0.5`` clamped to ``[0, in-1]``.
    """
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor (works for down-sizing too, no antialiasing)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    _, _, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    ah = bilinear_matrix(out_h, h, x.dtype)
    aw = bilinear_matrix(out_w, w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True),)

    return make_result(np.ascontiguousarray(out), (x,), backward, "upsample_bilinear")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling; H and W must be divisible by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}", dim="H" if h % k else "W")
    if k == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "avg_pool2d")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g.astype(x.dtype),)

    return make_result(out, (x,), backward, "avg_pool2d")


def box_mean(x: Tensor, k: int) -> Tensor:
    """Mean over every ``k x k`` window at stride 1 ("valid" placement)."""
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"box_mean: window {k} larger than {h}x{w}", dim="H" if k > h else "W")
    out = sliding_window_view(x.data, (k, k), axis=(2, 3)).mean(axis=(4, 5))

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        full = sliding_window_view(gp, (k, k), axis=(2, 3)).sum(axis=(4, 5))
        return (full / (k * k),)

    return make_result(np.ascontiguousarray(out, dtype=x.dtype), (x,), backward, "box_mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    return x.mean(axis=(2, 3))


def channel_scale(x: Tensor, a: Tensor) -> Tensor:
    """Multiply each channel map of ``x`` [N, C, H, W] by ``a`` [N, C]."""
    if a.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: weights {a.shape} vs features {x.shape}", dim="C")
    out = x.data * a.data[:, :, None, None]

    def backward(g):
        return g * a.data[:, :, None, None], (g * x.data).sum(axis=(2, 3))

    return make_result(out, (x, a), backward, "channel_scale")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}", dim="D")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation. In training mode the running buffers are updated in place."""
    n, c, h, w = x.shape
    if training:
        count = n * h * w
        if count < 2:
            raise ValueError("batchnorm2d: training statistics need more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm2d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = (inv_std / d) * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward, "layernorm")


def flatten_tokens(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C] (row-major spatial order)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def unflatten_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """[N, H*W, C] -> [N, C, H, W]; inverse of :func:`flatten_tokens`."""
    n, count, c = t.shape
    if count != h * w:
        raise ShapeError(f"cannot un-embed {count} tokens onto a {h}x{w} grid", dim="T")
    return t.transpose(0, 2, 1).reshape(n, c, h, w)
