"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and results; used when the extension is not built or when
``MANET_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(win, dtype=np.float32).reshape(n, c * k * k, ho * wo)


def col2im(cols, c, h, w, k, stride, pad):
    n = cols.shape[0]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def confusion(truth, pred, k):
    bad = (truth < 0) | (truth >= k) | (pred < 0) | (pred >= k)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"class index out of range [0, {k}) at position {i}: truth={truth[i]}, pred={pred[i]}"
        )
    return np.bincount(truth * k + pred, minlength=k * k).reshape(k, k).astype(np.int64)
