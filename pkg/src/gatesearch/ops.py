"""Forward/backward kernels for every node kind.

Exactness contract: masking a channel group to hard zero must produce
bit-identical network outputs to physically deleting the group's slices.
BLAS reorders reductions when tensor extents change, so every *forward*
reduction over a channel axis is accumulated sequentially at Python level,
and per-channel contractions use `einsum` on C-contiguous operands whose
reduction extent (kernel taps) is unaffected by channel deletion. Backward
kernels have no such obligation and use plain matmul where convenient.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import StructuralError


def _patches(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """im2col grouped by input channel: contiguous (C, N*P, k*k) tap matrix."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, hp, wp = xp.shape
    hout = (hp - k) // stride + 1
    wout = (wp - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, (c, n, hout, wout, k, k),
                      (sc, sn, sh * stride, sw * stride, sh, sw))
    return np.ascontiguousarray(view).reshape(c, n * hout * wout, k * k), hout, wout


# ----------------------------------------------------------------- conv2d

def conv2d_forward(x, w, b, stride, retain):
    cout, cin, k, _ = w.shape
    n = x.shape[0]
    patches, hout, wout = _patches(x, k, stride)
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3).reshape(cin, cout, k * k))
    acc = np.zeros((n * hout * wout, cout))
    tmp = np.empty_like(acc)
    for c in range(cin):  # sequential over input channels, taps inside einsum
        np.einsum("pk,ok->po", patches[c], wt[c], out=tmp, optimize=False)
        acc += tmp
    if b is not None:
        acc = acc + b
    out = np.ascontiguousarray(
        acc.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2))
    cache = (patches, wt, x.shape, stride, k, b is not None) if retain else None
    return out, cache


def conv2d_backward(g, cache):
    patches, wt, xshape, stride, k, has_bias = cache
    n, cin, h, w_sp = xshape
    cout = wt.shape[1]
    hout, wout = g.shape[2], g.shape[3]
    gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
    dwt = np.empty_like(wt)
    dpatches = np.empty_like(patches)
    for c in range(cin):
        dwt[c] = gflat.T @ patches[c]                # (cout, k*k)
        dpatches[c] = gflat @ wt[c]                  # (N*P, k*k)
    dw = np.ascontiguousarray(
        dwt.reshape(cin, cout, k, k).transpose(1, 0, 2, 3))
    db = gflat.sum(axis=0) if has_bias else None
    # col2im: scatter tap gradients back onto the padded input
    pad = k // 2
    dxp = np.zeros((cin, n, h + 2 * pad, w_sp + 2 * pad))
    dp = dpatches.reshape(cin, n, hout, wout, k * k)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + (hout - 1) * stride + 1:stride,
                j:j + (wout - 1) * stride + 1:stride] += dp[:, :, :, :, i * k + j]
    dx = np.ascontiguousarray(
        dxp.transpose(1, 0, 2, 3))[:, :, pad:pad + h, pad:pad + w_sp]
    return dx, dw, db


# ------------------------------------------------------- depthwise conv2d

def depthwise_forward(x, w, stride, retain):
    c, k, _ = w.shape
    n = x.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hout = (xp.shape[2] - k) // stride + 1
    wout = (xp.shape[3] - k) // stride + 1
    out = np.zeros((n, c, hout, wout))
    for i in range(k):  # elementwise tap accumulation: deletion-exact
        for j in range(k):
            out += xp[:, :, i:i + (hout - 1) * stride + 1:stride,
                      j:j + (wout - 1) * stride + 1:stride] * w[None, :, i, j, None, None]
    cache = (xp, x.shape, stride, k) if retain else None
    return out, cache


def depthwise_backward(g, w, cache):
    xp, xshape, stride, k = cache
    n, c, h, w_sp = xshape
    hout, wout = g.shape[2], g.shape[3]
    pad = k // 2
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + (hout - 1) * stride + 1:stride,
                     j:j + (wout - 1) * stride + 1:stride]
            dw[:, i, j] = np.einsum("ncpq,ncpq->c", g, win, optimize=False)
            dxp[:, :, i:i + (hout - 1) * stride + 1:stride,
                j:j + (wout - 1) * stride + 1:stride] += g * w[None, :, i, j, None, None]
    return dxp[:, :, pad:pad + h, pad:pad + w_sp], dw


# ------------------------------------------------------------------ dense

def dense_forward(x, w, b):
    n = x.shape[0]
    out = np.zeros((n, w.shape[1]))
    for c in range(w.shape[0]):  # broadcast FMA per input feature: deletion-exact
        out += x[:, c, None] * w[c][None, :]
    if b is not None:
        out = out + b
    return out


def dense_backward(g, x, w, has_bias):
    dw = x.T @ g
    dx = g @ w.T
    db = g.sum(axis=0) if has_bias else None
    return dx, dw, db


# ------------------------------------------------------------------ scale

def scale_forward(x, w):
    return x * (w[None, :, None, None] if x.ndim == 4 else w[None, :])


def scale_backward(g, x, w):
    wb = w[None, :, None, None] if x.ndim == 4 else w[None, :]
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    return g * wb, (g * x).sum(axis=axes)


# -------------------------------------------------------------- batchnorm

def _per_channel_rows(x: np.ndarray) -> np.ndarray:
    """View activations as contiguous (C, N*positions) rows."""
    if x.ndim == 4:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)
    return np.ascontiguousarray(x.T)


def _bshape(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps, decay,
                      training, retain):
    if training:
        rows = _per_channel_rows(x)  # rowwise sums: per-channel trees
        m = rows.shape[1]
        mean = rows.sum(axis=1) / m
        centered = rows - mean[:, None]
        var = (centered * centered).sum(axis=1) / m
        # moving averages feed eval mode only
        running_mean *= decay
        running_mean += (1.0 - decay) * mean
        running_var *= decay
        running_var += (1.0 - decay) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bshape(mean, x.ndim)) * _bshape(inv, x.ndim)
    out = _bshape(gamma, x.ndim) * xhat + _bshape(beta, x.ndim)
    cache = (xhat, inv, training) if retain else None
    return out, cache


def batchnorm_backward(g, gamma, cache):
    xhat, inv, training = cache
    axes = (0, 2, 3) if g.ndim == 4 else (0,)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    gb = _bshape(gamma, g.ndim)
    if not training:
        return g * gb * _bshape(inv, g.ndim), dgamma, dbeta
    m = g.size // g.shape[1]
    dx = (gb * _bshape(inv, g.ndim) / m) * (
        m * g
        - _bshape(dbeta, g.ndim)
        - xhat * _bshape(dgamma, g.ndim))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- pooling

def avgpool_forward(x, k, stride):
    n, c, h, w = x.shape
    hout = (h - k) // stride + 1
    wout = (w - k) // stride + 1
    out = np.zeros((n, c, hout, wout))
    for i in range(k):
        for j in range(k):
            out += x[:, :, i:i + (hout - 1) * stride + 1:stride,
                     j:j + (wout - 1) * stride + 1:stride]
    return out / (k * k)


def avgpool_backward(g, xshape, k, stride):
    dx = np.zeros(xshape)
    hout, wout = g.shape[2], g.shape[3]
    gk = g / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + (hout - 1) * stride + 1:stride,
               j:j + (wout - 1) * stride + 1:stride] += gk
    return dx


def global_pool_forward(x):
    n, c, h, w = x.shape
    rows = x.reshape(n * c, h * w)  # C-contiguous: per-(n,c) rowwise sums
    return rows.sum(axis=1).reshape(n, c) / (h * w)


def global_pool_backward(g, xshape):
    n, c, h, w = xshape
    return np.broadcast_to(g[:, :, None, None], xshape) / (h * w)


# ------------------------------------------------------------------- loss

def softmax_xent_forward(logits, labels):
    n, k = logits.shape
    if labels.shape[0] != n:
        raise StructuralError(
            f"label batch {labels.shape[0]} != logit batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise StructuralError(f"label out of range for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = np.log(ez.sum(axis=1)) - z[np.arange(n), labels]
    return float(nll.mean()), probs


def softmax_xent_backward(probs, labels):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n
