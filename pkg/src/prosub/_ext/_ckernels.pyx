# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Operation order matches the numpy versions so the Adam update is
bit-for-bit identical; exp may differ from numpy's vectorized exp in the
last ulp.
"""

import numpy as np
from libc.math cimport exp, sqrt

DEF LINEAR = 0
DEF RELU = 1
DEF SCALED_SIGMOID2 = 2


def bias_activation(double[:, ::1] z, const double[::1] bias, int act, double[:, ::1] out):
    cdef Py_ssize_t rows = z.shape[0], cols = z.shape[1], i, j
    cdef double t
    if bias.shape[0] != cols or out.shape[0] != rows or out.shape[1] != cols:
        raise ValueError("shape mismatch in bias_activation")
    if act < 0 or act > 2:
        raise ValueError(f"unknown activation code {act}")
    with nogil:
        for i in range(rows):
            for j in range(cols):
                t = z[i, j] + bias[j]
                z[i, j] = t
                if act == RELU:
                    out[i, j] = t if t > 0.0 else 0.0
                elif act == SCALED_SIGMOID2:
                    out[i, j] = 2.0 / (exp(-t) + 1.0)
                else:
                    out[i, j] = t
    return np.asarray(out)


def activation_backward(const double[:, ::1] z, const double[:, ::1] a,
                        const double[:, ::1] dout, int act, double[:, ::1] dz):
    cdef Py_ssize_t rows = z.shape[0], cols = z.shape[1], i, j
    cdef double ai
    if act < 0 or act > 2:
        raise ValueError(f"unknown activation code {act}")
    with nogil:
        for i in range(rows):
            for j in range(cols):
                if act == RELU:
                    dz[i, j] = dout[i, j] if z[i, j] > 0.0 else 0.0
                elif act == SCALED_SIGMOID2:
                    ai = a[i, j]
                    dz[i, j] = ai * (1.0 - ai * 0.5) * dout[i, j]
                else:
                    dz[i, j] = dout[i, j]
    return np.asarray(dz)


def adam_update(double[::1] param, const double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double g
    cdef double c1 = 1.0 - beta1, c2 = 1.0 - beta2
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = m[i] * beta1 + c1 * g
            v[i] = v[i] * beta2 + c2 * (g * g)
            param[i] = param[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


def signed_rank_counts(int n):
    cdef Py_ssize_t total = n * (n + 1) // 2, k, w, top = 0
    counts_arr = np.zeros(total + 1, dtype=np.float64)
    cdef double[::1] counts = counts_arr
    counts[0] = 1.0
    with nogil:
        for k in range(1, n + 1):
            top += k
            # descending so each rank is used at most once
            w = top
            while w >= k:
                counts[w] += counts[w - k]
                w -= 1
    return counts_arr
