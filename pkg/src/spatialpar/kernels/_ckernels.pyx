# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution loops on pre-padded NCHW float64 arrays.

Every output element sums its terms in an order fixed by (channel or
filter, kernel row, kernel column) alone, never by the element's position,
so a rank's local result matches the serial result bit for bit whenever
both see the same window.  Weight gradients sum over (sample, row,
column) of whatever block they are given.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport calloc, free

cnp.import_array()

cdef extern from *:
    ctypedef double* dptr "double * __restrict__"
    ctypedef const double* cdptr "const double * __restrict__"


def conv_fp_valid(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hx = x.shape[2], wx = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], k = w.shape[2]
    if w.shape[1] != c or w.shape[3] != k:
        raise ValueError(f"weight shape {tuple(w.shape)[:4]} does not match {c} input channels")
    if hx < k or wx < k:
        raise ValueError(f"input {hx}x{wx} smaller than kernel {k}")
    cdef Py_ssize_t ho = (hx - k) // stride + 1, wo = (wx - k) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t ik, jf, i, j, jc, a, b
    cdef double s
    cdef cdptr xr
    cdef cdptr wr
    cdef dptr yr
    with nogil:
        for ik in range(n):
            for jf in range(f):
                for i in range(ho):
                    yr = &y[ik, jf, i, 0]
                    for jc in range(c):
                        for a in range(k):
                            xr = &x[ik, jc, i * stride + a, 0]
                            wr = &w[jf, jc, a, 0]
                            for j in range(wo):
                                s = yr[j]
                                for b in range(k):
                                    s = s + xr[j * stride + b] * wr[b]
                                yr[j] = s
    return out


def conv_bpw_valid(const double[:, :, :, ::1] x, const double[:, :, :, ::1] dy, int stride, int k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t f = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    if dy.shape[0] != n:
        raise ValueError("sample count mismatch between x and dy")
    if (ho - 1) * stride + k > x.shape[2] or (wo - 1) * stride + k > x.shape[3]:
        raise ValueError("x does not cover every window of dy")
    out = np.zeros((f, c, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = out
    cdef Py_ssize_t jf, jc, a, b, ik, i, j
    cdef double g
    cdef cdptr xr
    cdef cdptr gr
    cdef dptr acc = <double *> calloc(k * k, sizeof(double))
    if acc == NULL:
        raise MemoryError()
    try:
        with nogil:
            for jf in range(f):
                for jc in range(c):
                    for a in range(k * k):
                        acc[a] = 0.0
                    for ik in range(n):
                        for i in range(ho):
                            gr = &dy[ik, jf, i, 0]
                            for a in range(k):
                                xr = &x[ik, jc, i * stride + a, 0]
                                for j in range(wo):
                                    g = gr[j]
                                    for b in range(k):
                                        acc[a * k + b] = acc[a * k + b] + g * xr[j * stride + b]
                    for a in range(k):
                        for b in range(k):
                            dw[jf, jc, a, b] = acc[a * k + b]
    finally:
        free(acc)
    return out


def conv_bpx_full(const double[:, :, :, ::1] dy, const double[:, :, :, ::1] w, int stride, int hx, int wx):
    cdef Py_ssize_t n = dy.shape[0], f = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef Py_ssize_t c = w.shape[1], k = w.shape[2]
    if w.shape[0] != f:
        raise ValueError(f"weight filters {w.shape[0]} do not match dy channels {f}")
    if (ho - 1) * stride + k > hx or (wo - 1) * stride + k > wx:
        raise ValueError("output extent too small for the transposed convolution")
    out = np.zeros((n, c, hx, wx), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t ik, jf, i, j, jc, a, b
    cdef double wv
    cdef cdptr gr
    cdef dptr dr
    with nogil:
        for ik in range(n):
            for jc in range(c):
                # terms per element in (filter, row, column) order
                for jf in range(f):
                    for a in range(k):
                        for b in range(k):
                            wv = w[jf, jc, a, b]
                            for i in range(ho):
                                gr = &dy[ik, jf, i, 0]
                                dr = &dx[ik, jc, i * stride + a, b]
                                if stride == 1:
                                    for j in range(wo):
                                        dr[j] = dr[j] + gr[j] * wv
                                else:
                                    for j in range(wo):
                                        dr[j * stride] = dr[j * stride] + gr[j] * wv
    return out
