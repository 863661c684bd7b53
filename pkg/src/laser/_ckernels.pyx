# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the windowed-MLP policy.

Same contract as ``_pykernels``.  Dense products go through BLAS dgemm and
the gather/scatter/softmax bookkeeping runs as C loops.  Elementwise
``tanh``/``exp`` are applied with numpy ufuncs over whole arrays: they are
SIMD-vectorised and several times faster than scalar libm calls here.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _mm(int M, int N, int K, double* A, double* B, double* C,
                     double beta) noexcept nogil:
    # row-major C[M,N] = A[M,K] @ B[K,N] + beta*C
    cdef char n = b'N'
    cdef double one = 1.0
    dgemm(&n, &n, &N, &M, &K, &one, B, &N, A, &K, &beta, C, &N)


cdef inline void _mm_tn(int M, int N, int K, double* A, double* B, double* C,
                        double beta) noexcept nogil:
    # row-major C[M,N] = A[K,M].T @ B[K,N] + beta*C
    cdef char n = b'N'
    cdef char t = b'T'
    cdef double one = 1.0
    dgemm(&n, &t, &N, &M, &K, &one, B, &N, A, &M, &beta, C, &N)


cdef inline void _mm_nt(int M, int N, int K, double* A, double* B, double* C,
                        double beta) noexcept nogil:
    # row-major C[M,N] = A[M,K] @ B[N,K].T + beta*C
    cdef char n = b'N'
    cdef char t = b'T'
    cdef double one = 1.0
    dgemm(&t, &n, &N, &M, &K, &one, B, &K, A, &K, &beta, C, &N)


def forward(const double[::1] theta, int V, int D, int H, int W, const long[:, ::1] ctx):
    cdef Py_ssize_t R = ctx.shape[0]
    cdef int WD = W * D
    cdef double* E = <double*>&theta[0]
    cdef double* W1 = E + V * D
    cdef double* b1 = W1 + WD * H
    cdef double* W2 = b1 + H
    cdef double* b2 = W2 + H * V

    x_arr = np.zeros((R, WD))
    h_arr = np.empty((R, H))
    lp_arr = np.empty((R, V))
    cdef double[:, ::1] x = x_arr
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] lp = lp_arr
    cdef Py_ssize_t r, j, d, k
    cdef long tok
    cdef double m, s

    if R == 0:
        return x_arr, h_arr, lp_arr
    with nogil:
        for r in range(R):
            for j in range(W):
                tok = ctx[r, j]
                if tok >= 0:
                    for d in range(D):
                        x[r, j * D + d] = E[tok * D + d]
            for k in range(H):
                h[r, k] = b1[k]
        _mm(R, H, WD, &x[0, 0], W1, &h[0, 0], 1.0)
    np.tanh(h_arr, out=h_arr)
    with nogil:
        for r in range(R):
            for k in range(V):
                lp[r, k] = b2[k]
        _mm(R, V, H, &h[0, 0], W2, &lp[0, 0], 1.0)
        for r in range(R):
            m = lp[r, 0]
            for k in range(1, V):
                if lp[r, k] > m:
                    m = lp[r, k]
            for k in range(V):
                lp[r, k] -= m
    ez_arr = np.exp(lp_arr)
    cdef double[:, ::1] ez = ez_arr
    with nogil:
        for r in range(R):
            s = 0.0
            for k in range(V):
                s += ez[r, k]
            s = log(s)
            for k in range(V):
                lp[r, k] -= s
    return x_arr, h_arr, lp_arr


def backward(const double[::1] theta, int V, int D, int H, int W, const long[:, ::1] ctx,
             const double[:, ::1] x, const double[:, ::1] h, const double[:, ::1] logp,
             const long[::1] targets, const double[::1] coeffs):
    cdef Py_ssize_t R = ctx.shape[0]
    cdef int WD = W * D
    cdef double* W1 = <double*>&theta[0] + V * D
    cdef double* W2 = W1 + WD * H + H

    grad_arr = np.zeros(theta.shape[0])
    cdef double[::1] grad = grad_arr
    cdef double* gE = &grad[0]
    cdef double* gW1 = gE + V * D
    cdef double* gb1 = gW1 + WD * H
    cdef double* gW2 = gb1 + H
    cdef double* gb2 = gW2 + H * V

    if R == 0:
        return grad_arr
    dz_arr = np.empty((R, V))
    dpre_arr = np.empty((R, H))
    dx_arr = np.empty((R, WD))
    cdef double[:, ::1] dz = dz_arr
    cdef double[:, ::1] dpre = dpre_arr
    cdef double[:, ::1] dx = dx_arr
    cdef Py_ssize_t r, j, d, k
    cdef long tok
    cdef double c

    np.exp(logp, out=dz_arr)
    with nogil:
        for r in range(R):
            c = coeffs[r]
            for k in range(V):
                dz[r, k] *= -c
            dz[r, targets[r]] += c
            for k in range(V):
                gb2[k] += dz[r, k]
        _mm_tn(H, V, <int>R, <double*>&h[0, 0], &dz[0, 0], gW2, 0.0)
        _mm_nt(<int>R, H, V, &dz[0, 0], W2, &dpre[0, 0], 0.0)
        for r in range(R):
            for k in range(H):
                dpre[r, k] *= 1.0 - h[r, k] * h[r, k]
                gb1[k] += dpre[r, k]
        _mm_tn(WD, H, <int>R, <double*>&x[0, 0], &dpre[0, 0], gW1, 0.0)
        _mm_nt(<int>R, WD, H, &dpre[0, 0], W1, &dx[0, 0], 0.0)
        for r in range(R):
            for j in range(W):
                tok = ctx[r, j]
                if tok >= 0:
                    for d in range(D):
                        gE[tok * D + d] += dx[r, j * D + d]
    return grad_arr


def sample_tokens(const double[:, ::1] logp, const double[::1] u):
    cdef Py_ssize_t R = logp.shape[0]
    cdef Py_ssize_t V = logp.shape[1]
    out_arr = np.empty(R, dtype=np.int64)
    cdef long[::1] out = out_arr
    cdef Py_ssize_t r, k
    cdef double total, thresh, c
    p_arr = np.exp(logp)
    cdef double[:, ::1] p = p_arr
    with nogil:
        for r in range(R):
            total = 0.0
            for k in range(V):
                total += p[r, k]
            thresh = u[r] * total
            c = 0.0
            out[r] = V - 1
            for k in range(V):
                c += p[r, k]
                if not (c < thresh):
                    out[r] = k
                    break
    return out_arr
