"""Differentiable neural-network primitives built on :mod:`manet.tensor`.

Spatial ops take ``(C, H, W)`` or batched ``(N, C, H, W)`` inputs.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional

import numpy as np

from . import kernels
from .tensor import DTYPE, ShapeError, Tensor, _make, as_tensor, matmul, mean, reshape

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


# -- activations -----------------------------------------------------------
def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(DTYPE), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    d = x.data
    t = np.tanh(_GELU_C * (d + 0.044715 * d ** 3))
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * dt),)

    return _make(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- normalization -----------------------------------------------------------
def layer_norm(x, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine ``gamma``/``beta``."""
    x = as_tensor(x)
    c = x.shape[-1]
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} does not match last axis {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return grads

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return _make(out.astype(DTYPE), parents, backward)


def channel_layer_norm(x, gamma=None, beta=None, eps: float = LN_EPS) -> Tensor:
    """Layer norm across the channel axis of an ``(N, C, H, W)`` map."""
    x = as_tensor(x)
    y = layer_norm(x.transpose(0, 2, 3, 1), gamma, beta, eps)
    return y.transpose(0, 3, 1, 2)


# -- convolution -----------------------------------------------------------
def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def conv2d(x, kernels_, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernels_`` of shape (C_out, C_in, k, k)."""
    x, squeeze = _batched(as_tensor(x))
    w = as_tensor(kernels_)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernels must be (C_out, C_in, k, k), got {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels {w.shape} expect {ci}")
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: non-integral output extent for input {h}x{wd}, k={k}, stride={stride}, pad={pad}")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(co, -1)
    out = wmat @ cols
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
        out = out + b.data[:, None]

    def backward(g):
        g = g.reshape(n, co, ho * wo)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im(wmat.T @ g, x.shape, k, stride, pad)
        if w.requires_grad:
            gw = np.einsum("nol,nkl->ok", g, cols, optimize=True).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)) if b.requires_grad else None)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _unbatch(_make(out.reshape(n, co, ho, wo), parents, backward), squeeze)


def deconv2d(x, kernels_, bias=None, up_factor: int = 2) -> Tensor:
    """Transposed convolution with kernel size == stride == ``up_factor``.

    ``kernels_`` has shape (C_in, C_out, up, up); output extent is exactly
    ``up_factor`` times the input extent.
    """
    if up_factor not in (2, 4):
        raise ValueError(f"deconv2d supports up_factor 2 or 4, got {up_factor}")
    x, squeeze = _batched(as_tensor(x))
    w = as_tensor(kernels_)
    n, ci, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != ci or w.shape[2:] != (up_factor, up_factor):
        raise ShapeError(
            f"deconv2d: kernels {w.shape} incompatible with input {x.shape} and up_factor {up_factor}")
    co = w.shape[1]
    u = up_factor
    wmat = w.data.reshape(ci, co * u * u)
    xmat = x.data.reshape(n, ci, h * wd)
    out_shape = (n, co, h * u, wd * u)
    out = kernels.col2im(wmat.T @ xmat, out_shape, u, u, 0)
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"deconv2d: bias shape {b.shape} != ({co},)")
        out = out + b.data[:, None, None]

    def backward(g):
        gcols = kernels.im2col(g, u, u, 0)
        gx = (wmat @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (np.einsum("nil,nkl->ik", xmat, gcols, optimize=True).reshape(w.shape)
              if w.requires_grad else None)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _unbatch(_make(out, parents, backward), squeeze)


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: (..., C, H, W) -> (..., C)."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool needs (..., C, H, W), got {x.shape}")
    return mean(x, axis=(-2, -1))


def avg_pool2(x) -> Tensor:
    """2x2 mean pooling of an (N, C, H, W) map with even H, W."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    return mean(reshape(x, (n, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


@lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, edge-clamped (align_corners=False convention)
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Separable bilinear upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ah = Tensor(_bilinear_matrix(h, h * factor))
    aw_t = Tensor(_bilinear_matrix(w, w * factor).T)
    return matmul(matmul(ah, x), aw_t)


# -- losses -----------------------------------------------------------------
def cross_entropy(logits, labels) -> Tensor:
    """Mean per-pixel cross-entropy; class axis is 0 for (K, H, W) and 1 for (N, K, H, W)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    axis = 0 if logits.ndim == 3 else 1
    k = logits.shape[axis]
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != expected:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label values must lie in [0, {k}), "
                         f"got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    picked = np.take_along_axis(logp, np.expand_dims(labels, axis).astype(np.int64), axis=axis)
    count = labels.size
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(labels, axis).astype(np.int64), 1.0, axis=axis)
        return ((grad - onehot) * (float(g) / count),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), backward)
