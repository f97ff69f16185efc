# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"


def softmax_forward(const double[:, ::1] x, mask=None):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef const cnp.npy_bool[:, ::1] mk
    cdef double m, s
    cdef bint has_mask = mask is not None
    cdef bint any_allowed
    if has_mask:
        mk = np.ascontiguousarray(mask, dtype=np.bool_)
    for i in range(rows):
        m = -INFINITY
        any_allowed = False
        for j in range(n):
            if has_mask and not mk[i, j]:
                continue
            any_allowed = True
            if x[i, j] > m:
                m = x[i, j]
        if not any_allowed:
            for j in range(n):
                y[i, j] = 1.0 / n
            continue
        s = 0.0
        for j in range(n):
            if has_mask and not mk[i, j]:
                y[i, j] = 0.0
            else:
                y[i, j] = exp(x[i, j] - m)
                s += y[i, j]
        for j in range(n):
            y[i, j] = y[i, j] / s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy, mask=None):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef const cnp.npy_bool[:, ::1] mk
    cdef bint has_mask = mask is not None
    cdef bint any_allowed
    cdef double dot
    if has_mask:
        mk = np.ascontiguousarray(mask, dtype=np.bool_)
    for i in range(rows):
        any_allowed = True
        if has_mask:
            any_allowed = False
            for j in range(n):
                if mk[i, j]:
                    any_allowed = True
                    break
        if not any_allowed:
            for j in range(n):
                gx[i, j] = 0.0
            continue
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layernorm_forward(const double[:, ::1] x, const double[::1] gain, const double[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    cdef double mu, var, d, r
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rs[i] = r
        for j in range(n):
            xh[i, j] = (x[i, j] - mu) * r
            y[i, j] = xh[i, j] * gain[j] + bias[j]
    return out, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] gy, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t rows = gy.shape[0], n = gy.shape[1], i, j
    gx_arr = np.empty((rows, n), dtype=np.float64)
    gg_arr = np.zeros(n, dtype=np.float64)
    gb_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double s1, s2, g
    for i in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
            g = gy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
        for j in range(n):
            g = gy[i, j] * gain[j]
            gx[i, j] = (rstd[i] / n) * (n * g - s1 - xhat[i, j] * s2)
    return gx_arr, gg_arr, gb_arr
