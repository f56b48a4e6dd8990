# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled element-wise kernels for the training inner loop.

Single-pass loops over contiguous float64 buffers; mirrors
``pfrnn._kernels.pure`` exactly (up to floating-point rounding of the
underlying libm calls). The sigmoid/tanh forwards stay on numpy, whose
vectorized exp/tanh beat a scalar libm loop; the fused gradient kernels
and the scatter-add are where compiling pays.
"""

import numpy as np

from .pure import sigmoid, tanh

cimport numpy as cnp

cnp.import_array()

BACKEND = "fast"


def sigmoid_grad(cnp.ndarray y, cnp.ndarray g):
    cdef cnp.ndarray out = np.empty_like(y)
    cdef double[::1] yv = y.ravel()
    cdef double[::1] gv = g.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = yv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out


def tanh_grad(cnp.ndarray y, cnp.ndarray g):
    cdef cnp.ndarray out = np.empty_like(y)
    cdef double[::1] yv = y.ravel()
    cdef double[::1] gv = g.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = yv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] * (1.0 - yv[i] * yv[i])
    return out


def relu(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out


def relu_grad(cnp.ndarray x, cnp.ndarray g):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] gv = g.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out


def scatter_add_rows(cnp.ndarray dst, cnp.ndarray idx, cnp.ndarray src):
    """dst[idx[m], :] += src[m, :] with repeated-index accumulation."""
    cdef double[:, ::1] dv = dst
    cdef double[:, ::1] sv = np.ascontiguousarray(src)
    cdef long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t m, h, r
    cdef Py_ssize_t nrows = sv.shape[0], ncols = sv.shape[1]
    with nogil:
        for m in range(nrows):
            r = iv[m]
            for h in range(ncols):
                dv[r, h] += sv[m, h]
