# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Accumulation order matches ``_kernels_py`` exactly: per output element the
reduction index advances sequentially in float64. ``exp`` is delegated to
numpy in both backends so the two stay bit-identical.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

NAME = "cython"


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double aip
    out = np.empty((m, n), dtype=np.float32)
    cdef float[:, ::1] o = out
    acc_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    with nogil:
        for i in range(m):
            for j in range(n):
                acc[j] = 0.0
            # i-k-j order: sequential in k per element, vectorizable over j
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    acc[j] = acc[j] + aip * <double>b[p, j]
            for j in range(n):
                o[i, j] = <float>acc[j]
    return out


def softmax_rows(const float[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s
    buf_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] buf = buf_arr
    with nogil:
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            for j in range(n):
                buf[i, j] = <double>x[i, j] - mx
    buf_arr = np.exp(buf_arr)
    buf = buf_arr
    out = np.empty((m, n), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        for i in range(m):
            s = 0.0
            for j in range(n):
                s = s + buf[i, j]
            for j in range(n):
                o[i, j] = <float>(buf[i, j] / s)
    return out


def row_l2_normalize(const float[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double s, v
    out = np.empty((m, n), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        for i in range(m):
            s = 0.0
            for j in range(n):
                v = x[i, j]
                s = s + v * v
            s = sqrt(s)
            if s == 0.0:
                s = 1.0
            for j in range(n):
                o[i, j] = <float>(<double>x[i, j] / s)
    return out
