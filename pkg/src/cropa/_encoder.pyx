# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused vision-encoder kernels (compiled backend).

All arrays are C-contiguous float64.  Row-major products are issued to the
Fortran dgemm by swapping operands: C^T = op(B)^T op(A)^T.
"""

import numpy as np

from libc.math cimport exp, sqrt
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm


cdef inline void mm(char ta, char tb, int m, int n, int k, double alpha,
                    const double* A, int lda, const double* B, int ldb,
                    double beta, double* C, int ldc) noexcept nogil:
    # C (m x n, row-major) = alpha * op(A) op(B) + beta * C
    dgemm(&tb, &ta, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef inline void softmax_rows(double* S, int P) noexcept nogil:
    cdef int i, j
    cdef double mx, tot
    for i in range(P):
        mx = S[i * P]
        for j in range(1, P):
            if S[i * P + j] > mx:
                mx = S[i * P + j]
        tot = 0.0
        for j in range(P):
            S[i * P + j] = exp(S[i * P + j] - mx)
            tot += S[i * P + j]
        for j in range(P):
            S[i * P + j] /= tot


def encoder_forward(const double[:, ::1] patches, const double[:, ::1] proj,
                    const double[:, :, :, ::1] wq, const double[:, :, :, ::1] wk,
                    const double[:, :, :, ::1] wv, const double[:, :, ::1] wo):
    cdef int L = wq.shape[0], H = wq.shape[1], d = wq.shape[2], hd = wq.shape[3]
    cdef int P = patches.shape[0], pdim = patches.shape[1]
    cdef double inv = 1.0 / sqrt(<double>hd)
    xs_a = np.empty((L + 1, P, d))
    q_a = np.empty((L, H, P, hd))
    k_a = np.empty((L, H, P, hd))
    v_a = np.empty((L, H, P, hd))
    att_a = np.empty((L, H, P, P))
    heads_a = np.empty((L, P, d))
    cdef double[:, :, ::1] xs = xs_a
    cdef double[:, :, :, ::1] q = q_a
    cdef double[:, :, :, ::1] k = k_a
    cdef double[:, :, :, ::1] v = v_a
    cdef double[:, :, :, ::1] att = att_a
    cdef double[:, :, ::1] heads = heads_a
    cdef int l, h
    with nogil:
        mm(b'N', b'N', P, d, pdim, 1.0, &patches[0, 0], pdim, &proj[0, 0], d, 0.0, &xs[0, 0, 0], d)
        for l in range(L):
            for h in range(H):
                mm(b'N', b'N', P, hd, d, 1.0, &xs[l, 0, 0], d, &wq[l, h, 0, 0], hd, 0.0, &q[l, h, 0, 0], hd)
                mm(b'N', b'N', P, hd, d, 1.0, &xs[l, 0, 0], d, &wk[l, h, 0, 0], hd, 0.0, &k[l, h, 0, 0], hd)
                mm(b'N', b'N', P, hd, d, 1.0, &xs[l, 0, 0], d, &wv[l, h, 0, 0], hd, 0.0, &v[l, h, 0, 0], hd)
                mm(b'N', b'T', P, P, hd, inv, &q[l, h, 0, 0], hd, &k[l, h, 0, 0], hd, 0.0, &att[l, h, 0, 0], P)
                softmax_rows(&att[l, h, 0, 0], P)
                mm(b'N', b'N', P, hd, P, 1.0, &att[l, h, 0, 0], P, &v[l, h, 0, 0], hd, 0.0,
                   &heads[l, 0, h * hd], d)
            memcpy(&xs[l + 1, 0, 0], &xs[l, 0, 0], P * d * sizeof(double))
            mm(b'N', b'N', P, d, d, 1.0, &heads[l, 0, 0], d, &wo[l, 0, 0], d, 1.0, &xs[l + 1, 0, 0], d)
    return xs_a, q_a, k_a, v_a, att_a, heads_a


def encoder_backward(cache, const double[:, ::1] proj,
                     const double[:, :, :, ::1] wq, const double[:, :, :, ::1] wk,
                     const double[:, :, :, ::1] wv, const double[:, :, ::1] wo,
                     g_out, g_values=None):
    cdef const double[:, :, :, ::1] q = cache[1]
    cdef const double[:, :, :, ::1] k = cache[2]
    cdef const double[:, :, :, ::1] v = cache[3]
    cdef const double[:, :, :, ::1] att = cache[4]
    cdef int L = wq.shape[0], H = wq.shape[1], d = wq.shape[2], hd = wq.shape[3]
    cdef int P = att.shape[2], pdim = proj.shape[0]
    cdef double inv = 1.0 / sqrt(<double>hd)
    cdef bint has_gv = g_values is not None
    cdef const double[:, :, :, ::1] gvals
    if has_gv:
        gvals = np.ascontiguousarray(g_values, dtype=np.float64)
    g_a = np.array(g_out, dtype=np.float64, order="C")
    gx_a = np.empty((P, d))
    gheads_a = np.empty((P, d))
    ga_a = np.empty((P, P))
    gv_a = np.empty((P, hd))
    gq_a = np.empty((P, hd))
    gk_a = np.empty((P, hd))
    out_a = np.empty((P, pdim))
    cdef double[:, ::1] g = g_a
    cdef double[:, ::1] gx = gx_a
    cdef double[:, ::1] gheads = gheads_a
    cdef double[:, ::1] ga = ga_a
    cdef double[:, ::1] gv = gv_a
    cdef double[:, ::1] gq = gq_a
    cdef double[:, ::1] gk = gk_a
    cdef double[:, ::1] out = out_a
    cdef int l, h, i, j
    cdef double beta, acc
    with nogil:
        for l in range(L - 1, -1, -1):
            memcpy(&gx[0, 0], &g[0, 0], P * d * sizeof(double))
            mm(b'N', b'T', P, d, d, 1.0, &g[0, 0], d, &wo[l, 0, 0], d, 0.0, &gheads[0, 0], d)
            for h in range(H):
                mm(b'N', b'T', P, P, hd, 1.0, &gheads[0, h * hd], d, &v[l, h, 0, 0], hd, 0.0, &ga[0, 0], P)
                beta = 0.0
                if has_gv:
                    memcpy(&gv[0, 0], &gvals[l, h, 0, 0], P * hd * sizeof(double))
                    beta = 1.0
                mm(b'T', b'N', P, hd, P, 1.0, &att[l, h, 0, 0], P, &gheads[0, h * hd], d, beta, &gv[0, 0], hd)
                for i in range(P):
                    acc = 0.0
                    for j in range(P):
                        acc = acc + ga[i, j] * att[l, h, i, j]
                    for j in range(P):
                        ga[i, j] = att[l, h, i, j] * (ga[i, j] - acc) * inv
                mm(b'N', b'N', P, hd, P, 1.0, &ga[0, 0], P, &k[l, h, 0, 0], hd, 0.0, &gq[0, 0], hd)
                mm(b'T', b'N', P, hd, P, 1.0, &ga[0, 0], P, &q[l, h, 0, 0], hd, 0.0, &gk[0, 0], hd)
                mm(b'N', b'T', P, d, hd, 1.0, &gq[0, 0], hd, &wq[l, h, 0, 0], hd, 1.0, &gx[0, 0], d)
                mm(b'N', b'T', P, d, hd, 1.0, &gk[0, 0], hd, &wk[l, h, 0, 0], hd, 1.0, &gx[0, 0], d)
                mm(b'N', b'T', P, d, hd, 1.0, &gv[0, 0], hd, &wv[l, h, 0, 0], hd, 1.0, &gx[0, 0], d)
            memcpy(&g[0, 0], &gx[0, 0], P * d * sizeof(double))
        mm(b'N', b'T', P, pdim, d, 1.0, &g[0, 0], d, &proj[0, 0], d, 0.0, &out[0, 0], pdim)
    return out_a
