# cython: language_level=3
"""Compiled GRU recurrence kernels.

Same contract as :mod:`gnmr._gru_ref`; the per-step matrix products go
straight to BLAS and the gate nonlinearities run as C loops, which removes
the interpreter overhead of the time loop.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef void _gemm_rm(char transa, char transb, int m, int n, int k,
                   double *a, int lda, double *b, int ldb,
                   double beta, double *c, int ldc) noexcept nogil:
    # row-major C = op(A) @ op(B) + beta * C, via column-major dgemm on transposed views
    cdef double alpha = 1.0
    dgemm(&transb, &transa, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def gru_forward(double[:, :, ::1] xw, double[:, ::1] u):
    cdef int steps = xw.shape[0]
    cdef int n = xw.shape[1]
    cdef int d3 = xw.shape[2]
    cdef int d = d3 // 3
    cdef int t, i, j
    cdef double z, c, hp
    h_arr = np.empty((steps, n, d))
    g_arr = np.empty((steps, n, d3))
    zeros_arr = np.zeros((n, d))
    rh_arr = np.empty((n, d))
    cdef double[:, :, ::1] h = h_arr
    cdef double[:, :, ::1] g = g_arr
    cdef double[:, ::1] zeros = zeros_arr
    cdef double[:, ::1] rh = rh_arr
    cdef double *hprev
    cdef double *gt
    if steps == 0 or n == 0:
        return h_arr, g_arr
    with nogil:
        for t in range(steps):
            hprev = &zeros[0, 0] if t == 0 else &h[t - 1, 0, 0]
            gt = &g[t, 0, 0]
            for i in range(n):
                for j in range(d3):
                    g[t, i, j] = xw[t, i, j]
            _gemm_rm(b'N', b'N', n, 2 * d, d, hprev, d, &u[0, 0], d3, 1.0, gt, d3)
            for i in range(n):
                for j in range(2 * d):
                    g[t, i, j] = _sigmoid(g[t, i, j])
                for j in range(d):
                    rh[i, j] = g[t, i, d + j] * hprev[i * d + j]
            _gemm_rm(b'N', b'N', n, d, d, &rh[0, 0], d, &u[0, 2 * d], d3, 1.0, gt + 2 * d, d3)
            for i in range(n):
                for j in range(d):
                    c = tanh(g[t, i, 2 * d + j])
                    g[t, i, 2 * d + j] = c
                    z = g[t, i, j]
                    hp = hprev[i * d + j]
                    h[t, i, j] = (1.0 - z) * hp + z * c
    return h_arr, g_arr


def gru_backward(double[:, :, ::1] dh, double[:, :, ::1] h,
                 double[:, :, ::1] gates, double[:, ::1] u):
    cdef int steps = dh.shape[0]
    cdef int n = dh.shape[1]
    cdef int d = dh.shape[2]
    cdef int d3 = 3 * d
    cdef int t, i, j
    cdef double z, r, c, hp, gg
    da_arr = np.empty((steps, n, d3))
    carry_arr = np.zeros((n, d))
    grad_arr = np.empty((n, d))
    drh_arr = np.empty((n, d))
    zeros_arr = np.zeros((n, d))
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, ::1] carry = carry_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[:, ::1] drh = drh_arr
    cdef double[:, ::1] zeros = zeros_arr
    cdef double *hprev
    if steps == 0 or n == 0:
        return da_arr
    with nogil:
        for t in range(steps - 1, -1, -1):
            hprev = &zeros[0, 0] if t == 0 else &h[t - 1, 0, 0]
            for i in range(n):
                for j in range(d):
                    z = gates[t, i, j]
                    c = gates[t, i, 2 * d + j]
                    hp = hprev[i * d + j]
                    gg = dh[t, i, j] + carry[i, j]
                    grad[i, j] = gg
                    da[t, i, 2 * d + j] = gg * z * (1.0 - c * c)
                    da[t, i, j] = gg * (c - hp) * z * (1.0 - z)
            _gemm_rm(b'N', b'T', n, d, d, &da[t, 0, 2 * d], d3, &u[0, 2 * d], d3, 0.0, &drh[0, 0], d)
            for i in range(n):
                for j in range(d):
                    z = gates[t, i, j]
                    r = gates[t, i, d + j]
                    hp = hprev[i * d + j]
                    da[t, i, d + j] = drh[i, j] * hp * r * (1.0 - r)
                    carry[i, j] = grad[i, j] * (1.0 - z) + drh[i, j] * r
            _gemm_rm(b'N', b'T', n, d, 2 * d, &da[t, 0, 0], d3, &u[0, 0], d3, 1.0, &carry[0, 0], d)
    return da_arr
