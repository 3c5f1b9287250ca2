# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels.

Layout contract (shared with the numpy fallback in ``_kernels.py``)::

    cols[(c * kh + u) * kw + v, (n * Ho + i) * Wo + j] = x[n, c, i + u, j + v]
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, int kh, int kw, real[:, ::1] cols):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] - kh + 1, Wo = x.shape[3] - kw + 1
    cdef Py_ssize_t c, u, v, n, i, row, col0
    cdef size_t nbytes = Wo * sizeof(real)
    with nogil:
        for c in range(C):
            for u in range(kh):
                for v in range(kw):
                    row = (c * kh + u) * kw + v
                    for n in range(N):
                        for i in range(Ho):
                            col0 = (n * Ho + i) * Wo
                            memcpy(&cols[row, col0], &x[n, c, i + u, v], nbytes)


def _col2im(real[:, ::1] cols, int kh, int kw, real[:, :, :, ::1] out):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t Ho = out.shape[2] - kh + 1, Wo = out.shape[3] - kw + 1
    cdef Py_ssize_t c, u, v, n, i, j, row, col0
    cdef real* src
    cdef real* dst
    with nogil:
        for c in range(C):
            for u in range(kh):
                for v in range(kw):
                    row = (c * kh + u) * kw + v
                    for n in range(N):
                        for i in range(Ho):
                            col0 = (n * Ho + i) * Wo
                            src = &cols[row, col0]
                            dst = &out[n, c, i + u, v]
                            for j in range(Wo):
                                dst[j] += src[j]


def im2col(x, int kh, int kw):
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    cols = np.empty((C * kh * kw, N * Ho * Wo), dtype=x.dtype)
    _im2col(x, kh, kw, cols)
    return cols


def col2im(cols, shape, int kh, int kw):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, kh, kw, out)
    return out
