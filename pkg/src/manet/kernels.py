"""Kernel dispatch: compiled Cython extension when importable, numpy fallback otherwise.

Set ``MANET_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("MANET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"


def im2col(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) patch matrix, rows ordered (c, ki, kj)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if k == stride and pad == 0:
        # non-overlapping windows are a pure reshape
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        v = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
        return np.ascontiguousarray(v.transpose(0, 1, 3, 5, 2, 4)).reshape(n, c * k * k, ho * wo)
    return _impl.im2col(x, int(k), int(stride), int(pad))


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an (N, C, H, W) image."""
    n, c, h, w = shape
    cols = np.ascontiguousarray(cols, dtype=np.float32)
    if k == stride and pad == 0 and h % k == 0 and w % k == 0:
        ho, wo = h // k, w // k
        v = cols.reshape(n, c, k, k, ho, wo).transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(v).reshape(n, c, h, w)
    return _impl.col2im(cols, int(c), int(h), int(w), int(k), int(stride), int(pad))


def confusion(truth, pred, k):
    """K x K count table, rows = truth, cols = prediction."""
    truth = np.ascontiguousarray(np.ravel(truth), dtype=np.int64)
    pred = np.ascontiguousarray(np.ravel(pred), dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError(f"truth and prediction sizes differ: {truth.shape} vs {pred.shape}")
    return _impl.confusion(truth, pred, int(k))
