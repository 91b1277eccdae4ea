"""Recovering latent degree laws from two proxies and assembling the latent exposure posterior."""

import logging
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .errors import (
    AmbiguousOrdering,
    BadArgs,
    ComplexSpectrum,
    NonIdentified,
    SingularInput,
    ThinCell,
)

log = logging.getLogger(__name__)

MODES = {"nfn": 0, "no_false_negative": 0, "a": 0, "nfp": 1, "no_false_positive": 1, "b": 1}
COND_LIMIT = 1e12
IMAG_TOL = 1e-6
DISTINCT_TOL = 1e-8
CLIP_WARN = 0.05


def mode_triangle(mode):
    """Shape of the one-type proxy's conditional matrix implied by the error mode."""
    return "lower" if mode_code(mode) == 0 else "upper"


def mode_code(mode):
    if mode in (0, 1):
        return mode
    try:
        return MODES[mode]
    except KeyError:
        raise BadArgs(f"unknown one-type mode {mode!r}; use 'nfn' or 'nfp'") from None


def binom_pmf(n, s, p1):
    if not (0 <= s <= n):
        raise BadArgs(f"need 0 <= s <= n, got s={s}, n={n}")
    if not 0.0 <= p1 <= 1.0:
        raise BadArgs("p1 must lie in [0, 1]")
    return comb(n, s) * p1 ** s * (1.0 - p1) ** (n - s)


def one_type_kernel(s, s_star, n, n_star, p1, mode):
    """Binomial error kernel under one type of measurement error.

    ``nfn`` (no false negative) returns P(S = s | S* = s*, |N*| = n*, |N| = n);
    ``nfp`` (no false positive) returns P(S* = s* | S = s, |N*| = n*, |N| = n).
    Cells inconsistent with the mode are 0.
    """
    code = mode_code(mode)
    if s < 0 or s_star < 0 or s > n or s_star > n_star:
        return 0.0
    if code == 0:
        if n_star > n or s_star > s:
            return 0.0
    else:
        if n > n_star or s > s_star:
            return 0.0
    dn, ds = abs(n - n_star), abs(s - s_star)
    if ds > dn:
        return 0.0
    return comb(dn, ds) * p1 ** ds * (1.0 - p1) ** (dn - ds)


def lexi_index(s, n, K):
    if not (0 <= s <= n <= K - 1):
        raise BadArgs(f"need 0 <= s <= n <= K-1, got s={s}, n={n}, K={K}")
    return n * (n + 1) // 2 + s


def lexi_pairs(K):
    """Latent support (s*, n*) in lexicographic order: (0,0), (0,1), (1,1), (0,2), ..."""
    n = np.repeat(np.arange(K), np.arange(1, K + 1))
    s = np.concatenate([np.arange(m + 1) for m in range(K)]) if K else np.zeros(0, dtype=int)
    return s, n


def check_stochastic(F, tol=1e-10):
    F = np.asarray(F, dtype=float)
    if np.any(F < -tol) or np.any(F > 1 + tol):
        return False
    return bool(np.allclose(F.sum(axis=0), 1.0, atol=tol))


def triangularity_diagnostic(F):
    """(strictly-upper mass, strictly-lower mass) of a proxy-given-latent matrix."""
    F = np.asarray(F, dtype=float)
    return float(np.triu(F, 1).sum()), float(np.tril(F, -1).sum())


@dataclass
class IdentComponents:
    """Latent objects recovered at one covariate value.

    ``F_main`` is P(one-type proxy degree | latent degree), ``F_inst`` the
    same for the instrument proxy; columns index the latent degree.
    """

    F_main: np.ndarray
    F_inst: np.ndarray
    f_latent: np.ndarray
    T: np.ndarray
    f_n: np.ndarray
    quality: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.f_latent)


def build_observed_matrices(gamma, z, K):
    """(E, F_joint, marginal of the one-type degree) at ``z``."""
    tab = gamma.tables(z, K)
    cond = np.linalg.cond(tab.F_joint)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularInput(f"F_joint at z={z} has condition number {cond:.3g}")
    return tab.E, tab.F_joint, tab.F_joint.sum(axis=0)


def _clip_columns(V):
    """Clip negative entries of anchored columns (anchor entry +1) and rescale to sum 1.

    Returns the clipped columns and the clipped mass, measured relative to
    each column's positive mass.
    """
    pos = np.clip(V, 0.0, None)
    psum = pos.sum(axis=0)
    if np.any(psum <= 0):
        raise NonIdentified("an eigenvector has no positive mass")
    clipped = float(np.sum(-np.clip(V, None, 0.0).sum(axis=0) / psum))
    return pos / psum, clipped


def _order_columns(V, ordering):
    K = V.shape[0]
    claims = np.argmax(V, axis=0)
    collisions = K - len(np.unique(claims))
    if collisions == 0:
        perm = np.empty(K, dtype=int)
        perm[claims] = np.arange(K)
        return perm, 0
    if ordering == "strict":
        raise AmbiguousOrdering(f"{collisions} eigenvector(s) share an argmax row")
    rows, cols = linear_sum_assignment(-V)
    perm = np.empty(K, dtype=int)
    perm[rows] = cols
    return perm, collisions


def _diagonalize(M, ordering):
    """Eigenvectors of M as column-stochastic columns, reordered by their dominant row."""
    vals, vecs = np.linalg.eig(M)
    radius = float(np.max(np.abs(vals))) if len(vals) else 0.0
    imag = float(np.max(np.abs(vals.imag))) if len(vals) else 0.0
    if imag > IMAG_TOL * max(radius, 1e-300):
        raise ComplexSpectrum(f"max |Im(lambda)| = {imag:.3g} vs spectral radius {radius:.3g}")
    vals = vals.real
    srt = np.sort(vals)
    if len(srt) > 1 and np.min(np.diff(srt)) < DISTINCT_TOL * max(1.0, radius):
        raise NonIdentified("repeated eigenvalues; latent degree classes are not separable")
    pivot = np.argmax(np.abs(vecs), axis=0)
    vecs = (vecs / vecs[pivot, np.arange(vecs.shape[1])]).real
    V, clipped = _clip_columns(vecs)
    perm, collisions = _order_columns(V, ordering)
    return V[:, perm], vals[perm], {"imag": imag / max(radius, 1e-300), "clipped": clipped,
                                    "collisions": collisions}


def _triangular_vectors(M, upper):
    """Eigenvectors of the triangular projection of M, one per diagonal position."""
    K = M.shape[0]
    T = np.triu(M) if upper else np.tril(M)
    lam = np.diag(T).copy()
    scale = max(1.0, float(np.max(np.abs(lam))))
    if K > 1 and np.min(np.diff(np.sort(lam))) < DISTINCT_TOL * scale:
        raise NonIdentified("repeated diagonal entries; latent degree classes are not separable")
    V = np.zeros((K, K))
    for k in range(K):
        V[k, k] = 1.0
        if upper and k > 0:
            A = T[:k, :k] - lam[k] * np.eye(k)
            V[:k, k] = np.linalg.solve(A, -T[:k, k])
        elif not upper and k < K - 1:
            A = T[k + 1:, k + 1:] - lam[k] * np.eye(K - k - 1)
            V[k + 1:, k] = np.linalg.solve(A, -T[k + 1:, k])
    V, clipped = _clip_columns(V)
    below = np.tril(M, -1) if upper else np.triu(M, 1)
    return V, lam, {"imag": 0.0, "clipped": clipped, "collisions": 0,
                    "off_structure": float(np.abs(below).sum() / max(np.abs(M).sum(), 1e-300))}


def eigen_recover(E, F_joint, K=None, ordering="assignment", triangular=None, warn=True):
    """Recover both proxy-given-latent matrices, the latent degree law and E[Y | latent degree].

    ``E`` and ``F_joint`` have rows indexed by the instrument degree and
    columns by the one-type degree.

    ``triangular`` ('upper' or 'lower') declares that the one-type proxy
    never over- (upper) or under-reports (lower) the latent degree, so its
    conditional matrix is triangular and so is E' F'^-1. The decomposition
    then uses the triangular part of that matrix, whose spectrum is real and
    already ordered, and the instrument's matrix follows from
    F_joint = F_inst diag(f) F_main'. Without it the generic eigen-solver is
    used for both proxies.
    """
    E = np.asarray(E, dtype=float)
    F_joint = np.asarray(F_joint, dtype=float)
    if K is not None and F_joint.shape != (K, K):
        raise BadArgs(f"expected {K}x{K} matrices, got {F_joint.shape}")
    cond = np.linalg.cond(F_joint)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularInput(f"F_joint condition number {cond:.3g}")
    # E F^-1 = F_inst T F_inst^-1 ; E' F'^-1 = F_main T F_main^-1
    if triangular not in (None, "upper", "lower"):
        raise BadArgs("triangular must be None, 'upper' or 'lower'")
    try:
        M_main = np.linalg.solve(F_joint, E).T
        f_n = F_joint.sum(axis=0)
        if triangular is None:
            M_inst = np.linalg.solve(F_joint.T, E.T).T
            F_inst, T_inst, q_inst = _diagonalize(M_inst, ordering)
            F_main, T_main, q_main = _diagonalize(M_main, ordering)
        else:
            F_main, T_main, q_main = _triangular_vectors(M_main, triangular == "upper")
        f_lat = np.linalg.solve(F_main, f_n)
    except np.linalg.LinAlgError as exc:
        raise NonIdentified(f"singular system during recovery: {exc}") from None
    lat_clipped = float(-np.clip(f_lat, None, 0.0).sum())
    f_lat = np.clip(f_lat, 0.0, None)
    if f_lat.sum() <= 0:
        raise NonIdentified("latent degree law has no positive mass")
    f_lat = f_lat / f_lat.sum()
    if triangular is not None:
        # F_joint = F_inst diag(f) F_main'  =>  F_inst = F_joint F_main'^-1 diag(f)^-1
        with np.errstate(divide="ignore", invalid="ignore"):
            B = np.linalg.solve(F_main, F_joint.T).T / f_lat
        B = np.where(np.isfinite(B), B, 0.0)
        B[:, f_lat <= 0] = np.eye(len(f_lat))[:, f_lat <= 0]
        F_inst, c_inst = _clip_columns(B)
        T_inst = T_main
        q_inst = {"imag": 0.0, "clipped": c_inst, "collisions": 0}
    clipped = q_inst["clipped"] + q_main["clipped"] + lat_clipped
    if warn and clipped > CLIP_WARN:
        log.warning("clipped %.3f of negative probability mass during eigen-recovery", clipped)
    quality = {
        "cond": float(cond),
        "max_imag": max(q_inst["imag"], q_main["imag"]),
        "clipped_mass": clipped,
        "latent_clipped": lat_clipped,
        "collisions": q_inst["collisions"] + q_main["collisions"],
        "eig_mismatch": float(np.max(np.abs(T_inst - T_main))),
        "off_structure": q_main.get("off_structure", 0.0),
    }
    return IdentComponents(F_main=F_main, F_inst=F_inst, f_latent=f_lat, T=T_inst, f_n=f_n,
                           quality=quality)


def embed(comps, lower):
    """Place components recovered on the window [lower, K-1] into the full 0..K-1 grid.

    Degrees below ``lower`` get zero latent mass and identity columns, so
    they never enter a posterior.
    """
    if lower == 0:
        return comps
    m = comps.K
    K = m + lower
    Fm = np.eye(K)
    Fi = np.eye(K)
    Fm[lower:, lower:] = comps.F_main
    Fi[lower:, lower:] = comps.F_inst
    f = np.zeros(K)
    f[lower:] = comps.f_latent
    T = np.zeros(K)
    T[lower:] = comps.T
    fn = np.zeros(K)
    fn[lower:] = comps.f_n
    q = dict(comps.quality, lower=lower)
    return IdentComponents(F_main=Fm, F_inst=Fi, f_latent=f, T=T, f_n=fn, quality=q)


@dataclass
class LatentPosterior:
    x: tuple
    probs: np.ndarray
    pre_total: float
    K: int

    def expected_s(self):
        s, _ = lexi_pairs(self.K)
        return float(self.probs @ s)


def posterior_table(comps, p1, mode, eps=0.0):
    """Latent posterior for every observed (s, n) in lexicographic order.

    Returns ``(probs, totals)``: rows are normalised after clipping, ``totals``
    holds the pre-normalisation sums (0 where the cell is infeasible or
    trimmed because f(n | z) <= eps).
    """
    fn = np.where(comps.f_n > eps, comps.f_n, 0.0)
    raw = kernels.posterior_table(comps.F_main, comps.f_latent, fn, p1, mode_code(mode))
    totals = raw.sum(axis=1)
    probs = np.zeros_like(raw)
    ok = totals > 0
    probs[ok] = raw[ok] / totals[ok, None]
    return probs, totals


def latent_posterior(x, comps, p1, mode, eps=1e-3):
    """Posterior over (s*, n*) given the observed cell x = (d, s, z, n)."""
    d, s, z, n = x
    K = comps.K
    if not (0 <= s <= n <= K - 1):
        raise BadArgs(f"observed cell (s={s}, n={n}) outside support K={K}")
    if comps.f_n[n] <= eps:
        raise ThinCell(f"f(n={n} | z) = {comps.f_n[n]:.3g} is below the trimming threshold {eps}")
    probs, totals = posterior_table(comps, p1, mode)
    row = lexi_index(s, n, K)
    if totals[row] <= 0:
        raise ThinCell(f"no latent cell is compatible with (s={s}, n={n})")
    return LatentPosterior(x=tuple(x), probs=probs[row], pre_total=float(totals[row]), K=K)
