# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. ``_kernels_py`` mirrors every function here."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, M_PI

cnp.import_array()


cdef double[:, ::1] _binom_table(int K, double p1):
    # pmf[m, k] = C(m, k) p1^k (1-p1)^(m-k), built by the Pascal recursion
    cdef double[:, ::1] pmf = np.zeros((K, K), dtype=np.float64)
    cdef double q = 1.0 - p1
    cdef int m, k
    pmf[0, 0] = 1.0
    for m in range(1, K):
        pmf[m, 0] = pmf[m - 1, 0] * q
        for k in range(1, m + 1):
            pmf[m, k] = pmf[m - 1, k] * q + pmf[m - 1, k - 1] * p1
    return pmf


def posterior_table(double[:, ::1] F, double[::1] fstar, double[::1] fN,
                    double p1, int mode):
    """Unnormalised latent posterior for every observed (s, n) cell.

    Returns a ``(K_T, K_T)`` array; row ``n(n+1)/2 + s`` holds the weights
    over latent cells in the same lexicographic order.
    """
    cdef int K = F.shape[0]
    cdef int KT = K * (K + 1) // 2
    cdef double[:, ::1] pmf = _binom_table(K, p1)
    out_arr = np.zeros((KT, KT), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef int n, s, ns, ss, dn, ds, row, col
    cdef double base, denom, val
    for n in range(K):
        if fN[n] <= 0.0:
            continue
        for ns in range(K):
            if mode == 0:
                if ns > n:
                    continue
                dn = n - ns
            else:
                if ns < n:
                    continue
                dn = ns - n
            base = F[n, ns] * fstar[ns]
            if base <= 0.0:
                continue
            for s in range(n + 1):
                row = n * (n + 1) // 2 + s
                denom = pmf[n, s] * fN[n]
                for ss in range(ns + 1):
                    if mode == 0:
                        ds = s - ss
                    else:
                        ds = ss - s
                    if ds < 0 or ds > dn:
                        continue
                    col = ns * (ns + 1) // 2 + ss
                    if mode == 0:
                        val = pmf[dn, ds] * pmf[ns, ss] * base / denom
                    else:
                        val = pmf[dn, ds] * base / fN[n]
                    out[row, col] = val
    return out_arr


def neighborhood_meat(cnp.int32_t[::1] indptr, cnp.int32_t[::1] indices,
                      double[:, ::1] G):
    """Sum over i and j in the neighbourhood of i of the outer product G_i G_j'."""
    cdef Py_ssize_t n = G.shape[0]
    cdef Py_ssize_t p = G.shape[1]
    # neighbourhood sums of G row by row; the final p x p product goes to BLAS
    acc_arr = np.zeros((n, p), dtype=np.float64)
    cdef double[:, ::1] acc = acc_arr
    cdef Py_ssize_t i, jj, j, a
    for i in range(n):
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            for a in range(p):
                acc[i, a] += G[j, a]
    return np.asarray(G).T @ acc_arr


def gaussian_weights(double[:, ::1] X, double[::1] x, double h):
    """Product Gaussian kernel h^-Q prod_q phi((X_iq - x_q) / h) for each row."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t Q = X.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double norm = 1.0
    cdef double u, acc
    cdef Py_ssize_t i, q
    for q in range(Q):
        norm *= sqrt(2.0 * M_PI) * h
    for i in range(n):
        acc = 0.0
        for q in range(Q):
            u = (X[i, q] - x[q]) / h
            acc += u * u
        out[i] = exp(-0.5 * acc) / norm
    return out_arr
