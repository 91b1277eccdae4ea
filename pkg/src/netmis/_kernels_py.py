"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy import sparse
from scipy.special import comb


def _binom_table(K, p1):
    m = np.arange(K)[:, None]
    k = np.arange(K)[None, :]
    with np.errstate(invalid="ignore"):
        pmf = comb(m, k) * p1 ** k * (1.0 - p1) ** np.maximum(m - k, 0)
    pmf[k > m] = 0.0
    return pmf


_INDEX_CACHE = {}


def _pairs(K):
    if K not in _INDEX_CACHE:
        n = np.repeat(np.arange(K), np.arange(1, K + 1))
        s = np.concatenate([np.arange(m + 1) for m in range(K)])
        _INDEX_CACHE[K] = (s, n)
    return _INDEX_CACHE[K]


def posterior_table(F, fstar, fN, p1, mode):
    F = np.asarray(F, dtype=float)
    K = F.shape[0]
    pmf = _binom_table(K, p1)
    s, n = _pairs(K)
    S, N = s[:, None], n[:, None]
    Ss, Ns = s[None, :], n[None, :]
    if mode == 0:
        dn, ds = N - Ns, S - Ss
    else:
        dn, ds = Ns - N, Ss - S
    ok = (dn >= 0) & (ds >= 0) & (ds <= dn)
    dn_c = np.clip(dn, 0, K - 1)
    ds_c = np.clip(ds, 0, K - 1)
    base = F[N, Ns] * np.asarray(fstar)[Ns]
    fn = np.asarray(fN, dtype=float)[N]
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == 0:
            val = pmf[dn_c, ds_c] * pmf[Ns, Ss] * base / (pmf[N, S] * fn)
        else:
            val = pmf[dn_c, ds_c] * base / fn
    ok &= (fn > 0) & (base > 0)
    return np.where(ok, val, 0.0)


def neighborhood_meat(indptr, indices, G):
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    A = sparse.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(n, n))
    return G.T @ (A @ G)


def gaussian_weights(X, x, h):
    X = np.asarray(X, dtype=float)
    u = (X - np.asarray(x, dtype=float)[None, :]) / h
    Q = X.shape[1]
    return np.exp(-0.5 * np.sum(u * u, axis=1)) / (np.sqrt(2.0 * np.pi) * h) ** Q
