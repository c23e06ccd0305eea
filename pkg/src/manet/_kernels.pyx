# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for patch extraction, patch scatter-add and confusion counting."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) nogil:
    # first output index o with o * stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t n_out) nogil:
    # one past the last output index o with o * stride + off < size
    cdef Py_ssize_t m
    if size - off <= 0:
        return 0
    m = (size - off - 1) // stride + 1
    return m if m < n_out else n_out


def im2col(float[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = (np.zeros if pad else np.empty)((n, c * k * k, ho * wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, ii, i0, i1, j0, j1
    cdef float* dst
    cdef const float* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    i0 = _lo(ki - pad, stride)
                    i1 = _hi(ki - pad, stride, h, ho)
                    for kj in range(k):
                        j0 = _lo(kj - pad, stride)
                        j1 = _hi(kj - pad, stride, w, wo)
                        dst = &out[b, (ch * k + ki) * k + kj, 0]
                        for oi in range(i0, i1):
                            ii = oi * stride + ki - pad
                            src = &x[b, ch, ii, 0] + kj - pad
                            if stride == 1:
                                memcpy(dst + oi * wo + j0, src + j0, (j1 - j0) * sizeof(float))
                            else:
                                for oj in range(j0, j1):
                                    dst[oi * wo + oj] = src[oj * stride]
    return out_arr


def col2im(float[:, :, ::1] cols, int c, int h, int w, int k, int stride, int pad):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row, ii, base, i0, i1, j0, j1
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    i0 = _lo(ki - pad, stride)
                    i1 = _hi(ki - pad, stride, h, ho)
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        j0 = _lo(kj - pad, stride)
                        j1 = _hi(kj - pad, stride, w, wo)
                        for oi in range(i0, i1):
                            ii = oi * stride + ki - pad
                            base = oi * wo
                            for oj in range(j0, j1):
                                out[b, ch, ii, oj * stride + kj - pad] += cols[b, row, base + oj]
    return out_arr


def confusion(cnp.int64_t[::1] truth, cnp.int64_t[::1] pred, int k):
    out_arr = np.zeros((k, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, n = truth.shape[0]
    cdef cnp.int64_t t, p
    for i in range(n):
        t = truth[i]
        p = pred[i]
        if t < 0 or t >= k or p < 0 or p >= k:
            raise ValueError(f"class index out of range [0, {k}) at position {i}: truth={t}, pred={p}")
        out[t, p] += 1
    return out_arr
