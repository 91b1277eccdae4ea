"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting ``NETMIS_PURE=1``
forces the numpy fallback. ``BACKEND`` names whichever was chosen.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("NETMIS_PURE") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def posterior_table(F, fstar, fN, p1, mode):
    """Unnormalised latent posterior table; ``mode`` 0 = no false negative, 1 = no false positive."""
    return _impl.posterior_table(_f64(F), _f64(fstar), _f64(fN), float(p1), int(mode))


def neighborhood_meat(indptr, indices, G):
    return _impl.neighborhood_meat(
        np.ascontiguousarray(indptr, dtype=np.int32),
        np.ascontiguousarray(indices, dtype=np.int32),
        _f64(G),
    )


def gaussian_weights(X, x, h):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return _impl.gaussian_weights(_f64(X), _f64(np.atleast_1d(x)), float(h))
