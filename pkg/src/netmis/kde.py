"""First-stage product-kernel densities over mixed continuous/discrete data."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BadArgs, EmptyCell, EmptySample

ZERO_GUARD = 1e-12


def default_bandwidth(n, exponent=3.0 / 8.0):
    return float(n) ** (-exponent)


def gaussian_kernel(u):
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def product_kernel(u):
    """prod_q kappa(u_q) with a standard Gaussian kappa (no bandwidth scaling)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.size == 0:
        raise BadArgs("product_kernel needs at least one continuous coordinate")
    return float(np.prod(gaussian_kernel(u)))


@dataclass(frozen=True)
class VarSpec:
    continuous_dims: tuple = ()
    discrete_dims: tuple = ()

    @property
    def Q(self):
        return len(self.continuous_dims)


def sample_columns(sample):
    """Name -> 1-D column mapping for a ``Sample``, including each covariate by name."""
    cols = {
        "y": sample.y, "d": sample.d,
        "s1": sample.s1, "deg1": sample.deg1, "s2": sample.s2, "deg2": sample.deg2,
    }
    for k, name in enumerate(sample.z_names):
        cols[name] = sample.z[:, k]
    if sample.s_star is not None:
        cols["s_star"] = sample.s_star
        cols["deg_star"] = sample.deg_star
    return cols


def joint_density(sample, spec, w, h, weights=None):
    """Kernel estimate N^-1 sum_i K(W^c_i, w^c) 1[W^d_i = w^d].

    ``sample`` is a ``Sample`` or a name -> column mapping; ``w`` maps every
    role in ``spec`` to its evaluation value.
    """
    if h <= 0:
        raise BadArgs("bandwidth must be positive")
    cols = sample if isinstance(sample, dict) else sample_columns(sample)
    n = len(next(iter(cols.values()))) if cols else 0
    if n == 0:
        raise EmptySample("no rows")
    wt = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    mask = np.ones(n, dtype=bool)
    for name in spec.discrete_dims:
        mask &= np.asarray(cols[name]) == w[name]
    if spec.Q:
        X = np.column_stack([np.asarray(cols[name], dtype=float) for name in spec.continuous_dims])
        x = np.array([w[name] for name in spec.continuous_dims], dtype=float)
        k = kernels.gaussian_weights(X[mask], x, h)
        return float(np.sum(wt[mask] * k) / wt.sum())
    return float(wt[mask].sum() / wt.sum())


@dataclass(frozen=True)
class ZTables:
    """Conditional tables at one covariate value, all built from one set of kernel weights.

    Rows of ``F_joint`` / ``E`` index the instrument proxy's degree, columns
    the one-type proxy's degree.
    """

    z: np.ndarray
    fz: float
    F_joint: np.ndarray
    E: np.ndarray
    f_sn: np.ndarray
    f_n: np.ndarray
    mass: float
    lower: int = 0


class GammaHat:
    """The five nuisance densities of the first stage.

    Parameters
    ----------
    sample : Sample
    h : float, optional
        Bandwidth shared by all continuous dimensions; defaults to N^-3/8.
    main : int
        Proxy (1 or 2) carrying one type of measurement error. The other
        proxy plays the instrument.
    weights : array, optional
        Observation weights (all ones by default); used to differentiate
        the first stage with respect to single observations.
    """

    def __init__(self, sample, h=None, main=2, weights=None, y_weights=None):
        if sample.n < 2:
            raise EmptySample("first stage needs at least two rows")
        self.sample = sample
        self.h = default_bandwidth(sample.n) if h is None else float(h)
        if self.h <= 0:
            raise BadArgs("bandwidth must be positive")
        if main not in (1, 2):
            raise BadArgs("main proxy must be 1 or 2")
        self.main = main
        self.s, self.deg = sample.proxy(main)
        _, self.deg_inst = sample.proxy(3 - main)
        self.weights = np.ones(sample.n) if weights is None else np.asarray(weights, dtype=float)
        # y_weights perturbs only the outcome-weighted table (E)
        self.y_weights = self.weights if y_weights is None else np.asarray(y_weights, dtype=float)
        cont = np.asarray(sample.z_continuous, dtype=bool)
        self._zc = np.ascontiguousarray(sample.z[:, cont])
        self._zd = sample.z[:, ~cont]
        self._cont = cont
        self.total = float(self.weights.sum())

    def z_kernel(self, z):
        """K(Z^c_i, z^c) 1[Z^d_i = z^d] for every row (unweighted)."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        k = np.all(self._zd == z[~self._cont][None, :], axis=1).astype(float)
        if self._cont.any():
            idx = np.flatnonzero(k)
            k[idx] = kernels.gaussian_weights(self._zc[idx], z[self._cont], self.h)
        return k

    # -- the five evaluators -------------------------------------------------

    def f_z(self, z):
        return float(np.sum(self.weights * self.z_kernel(z)) / self.total)

    def f_nz(self, n, z):
        k = self.z_kernel(z) * (self.deg == n)
        return float(np.sum(self.weights * k) / self.total)

    def f_snz(self, s, n, z):
        k = self.z_kernel(z) * (self.deg == n) * (self.s == s)
        return float(np.sum(self.weights * k) / self.total)

    def f_ntnz(self, nt, n, z):
        k = self.z_kernel(z) * (self.deg == n) * (self.deg_inst == nt)
        return float(np.sum(self.weights * k) / self.total)

    def f_ntnyz(self, nt, n, y, z):
        k = self.z_kernel(z) * (self.deg == n) * (self.deg_inst == nt)
        idx = np.flatnonzero(k)
        ky = kernels.gaussian_weights(self.sample.y[idx], [y], self.h)
        return float(np.sum(self.weights[idx] * k[idx] * ky) / self.total)

    def cond_moment_y(self, z, nt, n):
        """Integral of y f(nt, n, y | z) dy: kernel-weighted mean of Y in the cell times its probability."""
        k = self.z_kernel(z)
        denom = np.sum(self.weights * k)
        if denom < ZERO_GUARD:
            raise EmptyCell(f"no kernel mass at z={z}")
        cell = (self.deg == n) & (self.deg_inst == nt)
        if not np.any(k[cell] > 0):
            raise EmptyCell(f"no kernel mass at cell (nt={nt}, n={n}, z={z})")
        return float(np.sum(self.y_weights[cell] * k[cell] * self.sample.y[cell]) / denom)

    # -- shared-pass tables --------------------------------------------------

    def tables(self, z, K, lower=0):
        """All conditional tables at ``z`` on the degree window [lower, K - 1].

        Degrees are coded to ``clip(deg, lower, K - 1) - lower`` so the tables
        are ``(K - lower)`` square; ``lower=0`` is plain top-coding.
        """
        if not 0 <= lower < K:
            raise BadArgs(f"need 0 <= lower < K, got lower={lower}, K={K}")
        k = self.z_kernel(z)
        wk = self.weights * k
        mass = float(wk.sum())
        if mass < ZERO_GUARD:
            raise EmptyCell(f"no kernel mass at z={z}")
        m = K - lower
        n = np.clip(self.deg, lower, K - 1) - lower
        nt = np.clip(self.deg_inst, lower, K - 1) - lower
        s = np.minimum(self.s, m - 1)
        flat = nt * m + n
        F = np.bincount(flat, weights=wk, minlength=m * m).reshape(m, m) / mass
        yk = self.y_weights * k * self.sample.y
        E = np.bincount(flat, weights=yk, minlength=m * m).reshape(m, m) / mass
        fsn = np.bincount(s * m + n, weights=wk, minlength=m * m).reshape(m, m) / mass
        fn = np.bincount(n, weights=wk, minlength=m) / mass
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return ZTables(z=z, fz=mass / self.total, F_joint=F, E=E, f_sn=fsn, f_n=fn, mass=mass,
                       lower=lower)


def estimate_gamma(sample, h=None, main=2):
    return GammaHat(sample, h=h, main=main)
