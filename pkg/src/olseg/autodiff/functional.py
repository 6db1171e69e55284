"""Differentiable image kernels in channels-last layout.

Feature maps are ``(N, H, W, C)``; a single ``(H, W, C)`` map is accepted by
every kernel and returned without the batch axis.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, reshape


def _with_batch(fn):
    """Let a batched kernel accept a single (H, W, C) map."""

    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ValueError(f"expected (N, H, W, C) or (H, W, C), got shape {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last (a BLAS product, much faster than ``sum``)."""
    flat = a.reshape(-1, a.shape[-1])
    return np.ones(flat.shape[0], dtype=a.dtype) @ flat


@_with_batch
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2D cross-correlation with a ``(k, k, c_in, c_out)`` kernel.

    Works on the flattened padded grid: the tap at offset (i, j) is the
    contiguous row range starting at ``i * padded_width + j``, so each of the
    k*k matrix products runs on views instead of copies. Outputs computed at
    the wrapped-around border positions are discarded.
    """
    kernel = as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be (k, k, c_in, c_out), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    n, h, w, c_in = x.shape
    if kernel.shape[2] != c_in:
        raise ValueError(f"channel mismatch: input has {c_in}, kernel expects {kernel.shape[2]}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    p = k // 2 if padding == "same" else 0
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"input {h}x{w} too small for a {k}x{k} valid convolution")
    K = kernel.data
    c_out = K.shape[3]
    dtype = np.result_type(x.dtype, K.dtype)

    if k == 1:
        xs = x.data.astype(dtype, copy=False)
        out = xs @ K[0, 0]
    else:
        xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))), dtype=dtype)
        hp, wp = xp.shape[1], xp.shape[2]
        X = xp.reshape(-1, c_in)
        total = X.shape[0]
        offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
        # few input channels: one im2col product beats k*k skinny ones
        use_cols = c_in * k * k <= 36
        if use_cols:
            Xe = np.concatenate([X, np.zeros((offsets[-1][2], c_in), dtype=dtype)])
            cols = np.empty((total, k * k, c_in), dtype=dtype)
            for t, (_, _, off) in enumerate(offsets):
                cols[:, t] = Xe[off:off + total]
            cols = cols.reshape(total, -1)
            grid = cols @ K.reshape(-1, c_out)
        else:
            grid = np.zeros((total, c_out), dtype=dtype)
            for i, j, off in offsets:
                grid[: total - off] += X[off:] @ K[i, j]
        out = np.ascontiguousarray(grid.reshape(n, hp, wp, c_out)[:, :ho, :wo])
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        gx = gk = None
        g = g.astype(dtype, copy=False)
        if k == 1:
            if kernel.requires_grad:
                gk = (xs.reshape(-1, c_in).T @ g.reshape(-1, c_out)).reshape(K.shape)
            if x.requires_grad:
                gx = g @ K[0, 0].T
        else:
            G = np.zeros((n, hp, wp, c_out), dtype=dtype)
            G[:, :ho, :wo] = g
            G = G.reshape(-1, c_out)
            if kernel.requires_grad:
                if use_cols:
                    gk = (cols.T @ G).reshape(K.shape)
                else:
                    gk = np.empty_like(K)
                    for i, j, off in offsets:
                        gk[i, j] = X[off:].T @ G[: total - off]
            if x.requires_grad:
                gX = np.zeros_like(X)
                for i, j, off in offsets:
                    gX[off:] += G[: total - off] @ K[i, j].T
                gx = gX.reshape(n, hp, wp, c_in)[:, p:p + h, p:p + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(channel_sum(g))
        return grads

    return Tensor.from_op(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In train mode the batch statistics are used and, when running buffers are
    given, they are updated in place. Eval mode reads the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if x.size == 0:
        raise ValueError("batch_norm on an empty batch")
    m = x.size // c

    if mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval mode needs running statistics")
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv_std).astype(x.dtype)
        xhat = (x.data - running_mean) * inv_std
        out = x.data * scale + (beta.data - running_mean * scale)

        def backward_eval(g):
            return g * scale, channel_sum(g * xhat), channel_sum(g)

        return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), backward_eval)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    mu = channel_sum(x.data) / m
    centered = x.data - mu
    var = channel_sum(centered * centered) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    if running_mean is not None and running_var is not None:
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

    def backward(g):
        dbeta = channel_sum(g)
        dgamma = channel_sum(g * xhat)
        gx = None
        if x.requires_grad:
            gx = (gamma.data * inv_std / m) * (m * g - dbeta - xhat * dgamma)
        return gx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """y = x where x >= 0, slope * x elsewhere; one slope per channel."""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.shape != (x.shape[-1],):
        raise ValueError(f"slope must have shape ({x.shape[-1]},), got {slope.shape}")
    negative_part = np.minimum(x.data, 0)
    out = x.data + (slope.data - 1) * negative_part

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = g + (slope.data - 1) * (g * (x.data < 0))
        gs = channel_sum(g * negative_part) if slope.requires_grad else None
        return gx, gs

    return Tensor.from_op(out, (x, slope), backward)


@_with_batch
def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first window entry."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    views = [x.data[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(((0, 0), (0, 1), (1, 0), (1, 1)), views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, i::2, j::2, :] = g * hit
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: out[2i] = .25 x[i-1] + .75 x[i], out[2i+1] = .75 x[i] + .25 x[i+1], edges clamped
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    out = np.empty((2 * a.shape[0],) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.25 * prev + 0.75 * a
    out[1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    gx = 0.75 * (ge + go)
    gx[:-1] += 0.25 * ge[1:]
    gx[0] += 0.25 * ge[0]
    gx[1:] += 0.25 * go[:-1]
    gx[-1] += 0.25 * go[-1]
    return np.moveaxis(gx, 0, axis)


@_with_batch
def upsample_bilinear2(x: Tensor) -> Tensor:
    """Double H and W by bilinear interpolation with half-pixel alignment."""
    out = _upsample_axis(_upsample_axis(x.data, 1), 2)
    return Tensor.from_op(
        out, (x,), lambda g: (_upsample_axis_adjoint(_upsample_axis_adjoint(g, 2), 1),)
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward)


def normalization_tolerance(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-5


def soft_argmax(p, axis: int = -1) -> Tensor:
    """Expected index along ``axis`` under an already-normalized distribution."""
    p = as_tensor(p)
    if np.any(p.data < 0):
        raise ValueError("soft_argmax needs nonnegative probabilities")
    sums = p.data.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > normalization_tolerance(p.dtype)):
        raise ValueError("soft_argmax needs probabilities that sum to 1 along the axis")
    axis = axis % p.ndim
    shape = [1] * p.ndim
    shape[axis] = p.shape[axis]
    pos = np.arange(p.shape[axis], dtype=p.dtype).reshape(shape)
    out = (p.data * pos).sum(axis=axis)
    return Tensor.from_op(out, (p,), lambda g: (np.expand_dims(g, axis) * pos,))
