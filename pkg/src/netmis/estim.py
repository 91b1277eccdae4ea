"""Second-stage estimation: the semiparametric two-proxy estimator, naive OLS and the single-proxy cell mean."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ident, kernels
from .casf import DEFAULT_MODEL
from .errors import (
    BadArgs,
    EmptyCell,
    EmptySample,
    NetmisError,
    NoConvergence,
    RankDeficient,
    SingularHessian,
)
from .kde import GammaHat
from .simgen import DepNeighborhoods

log = logging.getLogger(__name__)

TRIM_EPS = 1e-3
IDENT_ERRORS = (ident.ComplexSpectrum, ident.NonIdentified, ident.SingularInput,
                ident.AmbiguousOrdering)


def latent_grid(K):
    """(s*, n*) of every latent cell in lexicographic order."""
    return ident.lexi_pairs(K)


@dataclass
class Posteriors:
    """Per-unit latent posteriors on a common lexicographic grid of size K(K+1)/2.

    ``tau`` is the 0/1 trimming weight; ``K_unit`` is the support used at
    each unit's covariate value (cells beyond it carry zero mass).
    """

    probs: np.ndarray
    K: int
    tau: np.ndarray
    pre_total: np.ndarray
    K_unit: np.ndarray
    group: np.ndarray
    comps: dict = field(default_factory=dict)


@dataclass
class ThetaFit:
    theta_hat: np.ndarray
    hessian_H: np.ndarray
    meat_Omega: np.ndarray | None
    cov: np.ndarray | None
    objective_value: float
    n_used: int
    jac: np.ndarray | None = None
    resid: np.ndarray | None = None
    tau: np.ndarray | None = None
    iterations: int = 0
    names: tuple = ()


@dataclass(frozen=True)
class EffectEstimate:
    kind: str
    s: int
    z: float
    n: int
    estimate: float
    std_error: float
    contrast: np.ndarray | None = None


# -- mixed means -------------------------------------------------------------


def _unit_z(z):
    z = np.asarray(z, dtype=float)
    return z[..., 0] if z.ndim and z.shape[-1:] != () and z.ndim > 1 else z


def mixed_mean(x, theta, posterior, model=DEFAULT_MODEL):
    """sum_j m*(d, s*_j, z, n*_j; theta) phi_j(x) for one observed cell."""
    d, _, z, _ = x
    if tuple(posterior.x) != tuple(x):
        raise BadArgs("posterior was computed for a different observed cell")
    s, n = latent_grid(posterior.K)
    zz = float(np.atleast_1d(z)[0])
    return float(model.value(d, s, zz, n, theta) @ posterior.probs)


def _cell_terms(model, d, z, K, theta):
    """Model values and Jacobians on the latent grid for fixed (d, z)."""
    s, n = latent_grid(K)
    jac = model.jacobian(d, s, z, n, theta)
    val = jac @ theta if model.linear else model.value(d, s, z, n, theta)
    return val, jac


def unit_terms(sample, probs, K, theta, model=DEFAULT_MODEL, idx=None):
    """m_i(theta) = sum_j phi_ij m*(x*_ij) and its theta-Jacobian for the rows ``idx``."""
    idx = np.arange(sample.n) if idx is None else np.asarray(idx)
    zc = sample.scalar_z[idx]
    d = sample.d[idx]
    P = probs if len(probs) == len(idx) else probs[idx]
    m = np.zeros(len(idx))
    J = np.zeros((len(idx), model.dim))
    keys = np.column_stack([d, zc])
    uk, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    for k, (dk, zk) in enumerate(uk):
        rows = np.flatnonzero(inv == k)
        val, jac = _cell_terms(model, dk, zk, K, theta)
        m[rows] = P[rows] @ val
        J[rows] = P[rows] @ jac
    return m, J


# -- the semiparametric estimator --------------------------------------------


class SPE:
    """Two-proxy semiparametric estimator.

    Parameters
    ----------
    sample : Sample
    mode : {'nfn', 'nfp'}
        Error type of the main proxy: no false negatives or no false positives.
    main : int
        Which proxy carries one type of error; the other is the instrument.
    support : int, None, 'full' or 'auto'
        Degree support. An int K top-codes every degree at K-1. None uses the
        largest observed degree plus one. 'full' runs per covariate value up
        to the first degree nobody reports. 'auto' picks a window [L, K-1] per
        covariate value so that at most ``tail_mass`` of the units fall in
        each coded end bin, and narrows it when identification fails there.
    h : float, optional
        First-stage bandwidth (default N^-3/8).
    trim_eps : float
        Units with f(n, z) <= trim_eps get zero weight.
    structured : bool
        Use the triangular shape of the main proxy's conditional matrix that
        the error mode implies (see ``ident.eigen_recover``).
    top_margin : int
        Units whose observed degree is within ``top_margin`` of the top-coded
        bin are trimmed, as their posterior would lean on the coded bin.
        Applies only where some unit is actually top-coded.
    max_clip : float
        Under 'auto', windows whose recovery clips more negative mass than
        this are passed over for narrower ones.
    """

    def __init__(self, sample, mode, main=2, support="auto", h=None, model=DEFAULT_MODEL,
                 trim_eps=TRIM_EPS, ordering="assignment", p1=None, tail_mass=0.05, k_min=4,
                 structured=True, top_margin=2, max_clip=np.inf):
        if sample.n < 2:
            raise EmptySample("need at least two units")
        self.sample = sample
        self.mode = ident.mode_code(mode)
        self.main = main
        self.model = model
        self.trim_eps = trim_eps
        self.ordering = ordering
        self.gamma = GammaHat(sample, h=h, main=main)
        self.p1 = float(np.mean(sample.d)) if p1 is None else float(p1)
        self.tail_mass = tail_mass
        self.k_min = k_min
        self.support = support
        self.top_margin = int(top_margin)
        self.max_clip = float(max_clip)
        self.triangular = ident.mode_triangle(self.mode) if structured else None
        self.s, self.deg = sample.proxy(main)
        self.deg_inst = sample.proxy(3 - main)[1]
        zkeys, inv = np.unique(sample.z, axis=0, return_inverse=True)
        self.zkeys = zkeys
        self.group = inv.ravel()
        self.K_max = int(max(sample.deg1.max(), sample.deg2.max())) + 1

    # support -----------------------------------------------------------------

    def window(self, g):
        """Initial degree window (L, K) at covariate key ``g``."""
        if self.support is None:
            return 0, self.K_max
        if isinstance(self.support, (int, np.integer)):
            return 0, int(self.support)
        if isinstance(self.support, dict):
            w = self.support[g]
            return (0, int(w)) if np.isscalar(w) else (int(w[0]), int(w[1]))
        if self.support not in ("auto", "full"):
            raise BadArgs(f"unknown support rule {self.support!r}")
        k = self.gamma.weights * self.gamma.z_kernel(self.zkeys[g])
        hi = np.bincount(np.maximum(self.deg, self.deg_inst), weights=k, minlength=self.K_max)
        if self.support == "full":
            # every degree up to the first empty bin
            lo = np.bincount(np.minimum(self.deg, self.deg_inst), weights=k, minlength=self.K_max)
            empty = np.flatnonzero((hi <= 0) | (lo <= 0))
            return 0, int(empty[0]) if len(empty) else self.K_max
        lo = np.bincount(np.minimum(self.deg, self.deg_inst), weights=k, minlength=self.K_max)
        tail = np.cumsum(hi[::-1])[::-1] / hi.sum()
        head = np.cumsum(lo) / lo.sum()
        K = int(np.argmax(tail <= self.tail_mass)) if np.any(tail <= self.tail_mass) else self.K_max
        # bottom-code only the degrees that are too rare to fill their own bin
        L = int(np.argmax(head > self.tail_mass)) if head[0] <= self.tail_mass else 0
        L = min(L, 2)
        return L, max(K, L + self.k_min)

    def _candidates(self, g):
        L0, K0 = self.window(g)
        if self.support != "auto":
            yield L0, K0
            return
        for L in range(L0, L0 + 2):
            for K in range(K0, L + self.k_min - 1, -1):
                yield L, K

    def _recover(self, tab, warn=True):
        comps = ident.eigen_recover(tab.E, tab.F_joint, ordering=self.ordering,
                                    triangular=self.triangular, warn=warn)
        return ident.embed(comps, tab.lower)

    def identify(self, g):
        """Identification at covariate key ``g``; returns (L, K, comps, tables).

        Under the 'auto' rule windows are tried from widest to narrowest; the
        first whose recovery clips at most ``max_clip`` of negative mass is
        kept, otherwise the least-clipped successful window.
        """
        last = None
        best = None
        for L, K in self._candidates(g):
            try:
                tab = self.gamma.tables(self.zkeys[g], K, lower=L)
                comps = self._recover(tab)
            except IDENT_ERRORS as exc:
                last = exc
                continue
            clip = comps.quality["clipped_mass"]
            if self.support != "auto" or clip <= self.max_clip:
                return L, K, comps, tab
            if best is None or clip < best[0]:
                best = (clip, (L, K, comps, tab))
        if best is not None:
            return best[1]
        raise last

    # posteriors ----------------------------------------------------------------

    def _coded(self, idx, K):
        n = np.minimum(self.deg[idx], K - 1)
        s = np.minimum(self.s[idx], n)
        return s, n

    def _group_posterior(self, comps, K, idx):
        table, totals = ident.posterior_table(comps, self.p1, self.mode)
        s, n = self._coded(idx, K)
        rows = n * (n + 1) // 2 + s
        return table[rows], totals[rows]

    def _trim(self, idx, L, K, tab, tot):
        n = self.deg[idx]
        fnz = tab.f_n[np.clip(n, L, K - 1) - L] * tab.fz
        # margins only where the window actually codes some units
        top = self.top_margin if np.any(np.maximum(n, self.deg_inst[idx]) > K - 1) else -1
        bottom = int(np.any(np.minimum(n, self.deg_inst[idx]) < L))
        inside = (n >= L + bottom) & (n < K - 1 - top)
        return ((fnz > self.trim_eps) & inside & (tot > 0)).astype(float)

    def posteriors(self):
        N = self.sample.n
        results = {g: self.identify(g) for g in range(len(self.zkeys))}
        K = max(r[1] for r in results.values())
        KT = K * (K + 1) // 2
        probs = np.zeros((N, KT))
        pre = np.zeros(N)
        tau = np.zeros(N)
        K_unit = np.zeros(N, dtype=int)
        for g, (L, Kg, cg, tab) in results.items():
            idx = np.flatnonzero(self.group == g)
            P, tot = self._group_posterior(cg, Kg, idx)
            probs[idx, : P.shape[1]] = P
            pre[idx] = tot
            K_unit[idx] = Kg
            tau[idx] = self._trim(idx, L, Kg, tab, tot)
        return Posteriors(probs=probs, K=K, tau=tau, pre_total=pre, K_unit=K_unit,
                          group=self.group, comps=results)

    # fitting ---------------------------------------------------------------------

    def fit(self, nbrs=None, correction=True, fd_step=1e-5):
        post = self.posteriors()
        fit = fit_theta(self.sample, post, self.model)
        if nbrs is not None:
            delta = self.correction(fit, post, fd_step) if correction else None
            H, Om, cov = sandwich(fit.jac, fit.resid, fit.tau, nbrs, delta)
            fit.hessian_H, fit.meat_Omega, fit.cov = H, Om, cov
        self.posteriors_ = post
        return fit

    def _group_scores(self, tab, K, theta, tau, idx):
        """sum over the units ``idx`` of tau (Y - m) J under a (perturbed) table."""
        comps = self._recover(tab, warn=False)
        P, _ = self._group_posterior(comps, K, idx)
        m, J = unit_terms(self.sample, P, K, theta, self.model, idx=idx)
        return (tau[idx] * (self.sample.y[idx] - m)) @ J

    def correction(self, fit, post, fd_step=1e-5):
        """First-stage correction delta_i = N dG/dw_i - mean, by central differences.

        G = N^-1 sum_k tau_k (Y_k - m_k) J_k depends on observation i's weight
        w_i through the first-stage tables at every covariate key where its
        kernel weight is positive. The count channel (cell frequency and
        normalising mass) is shared by all units in the same coded
        (instrument degree, main degree) cell; the outcome channel of E is
        linear in Y_i.
        """
        N = self.sample.n
        theta = fit.theta_hat
        y = self.sample.y
        delta = np.zeros((N, self.model.dim))
        for g, (L, Kg, _, tab) in post.comps.items():
            idx = np.flatnonzero(self.group == g)
            if not np.any(fit.tau[idx] > 0):
                continue
            kw = self.gamma.weights * self.gamma.z_kernel(self.zkeys[g])
            touched = np.flatnonzero(kw > 0)
            m = Kg - L
            n = np.clip(self.deg[touched], L, Kg - 1) - L
            nt = np.clip(self.deg_inst[touched], L, Kg - 1) - L
            key = np.column_stack([nt * m + n, kw[touched]])
            cells, inv = np.unique(key, axis=0, return_inverse=True)
            inv = inv.ravel()
            for c, (cell, kv) in enumerate(cells):
                sel = touched[inv == c]
                a, b = divmod(int(cell), m)
                da, db = self._cell_derivs(tab, Kg, a, b, kv, theta, fit.tau, idx, fd_step)
                delta[sel] += da + np.outer(y[sel], db)
        return delta - delta.mean(axis=0)

    def _cell_derivs(self, tab, K, a, b, kv, theta, tau, idx, fd_step):
        """d(sum g)/dw for one (instrument, main) cell: count channel and unit-Y channel."""
        mass = tab.mass
        hw = fd_step * mass / kv
        h = hw * kv
        out = []
        for channel in ("count", "y"):
            vals = []
            for sgn in (1.0, -1.0):
                F = tab.F_joint.copy()
                E = tab.E.copy()
                fn = tab.f_n.copy()
                if channel == "count":
                    F *= mass
                    F[a, b] += sgn * h
                    F /= mass + sgn * h
                    E *= mass / (mass + sgn * h)
                    fn *= mass
                    fn[b] += sgn * h
                    fn /= mass + sgn * h
                else:
                    E[a, b] += sgn * h / mass
                t = _Tab(F, E, fn, tab.lower)
                vals.append(self._group_scores(t, K, theta, tau, idx))
            out.append((vals[0] - vals[1]) / (2 * hw))
        return out[0], out[1]


@dataclass
class _Tab:
    F_joint: np.ndarray
    E: np.ndarray
    f_n: np.ndarray
    lower: int = 0


def _solve_posdef(H, g):
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian(str(exc)) from None


def fit_theta(sample, posteriors, model=DEFAULT_MODEL, trim=None, theta0=None, tol=1e-8,
              max_iter=200):
    """Least squares of Y on the posterior-mixed model.

    Linear models solve the weighted normal equations on the mixed
    regressors; nonlinear models use Gauss-Newton with step halving.
    """
    tau = posteriors.tau if trim is None else np.asarray(trim, dtype=float)
    K = posteriors.K
    used = tau > 0
    if used.sum() < model.dim:
        raise RankDeficient(f"only {int(used.sum())} units survive trimming")
    y = sample.y
    N = sample.n
    theta = np.zeros(model.dim) if theta0 is None else model.check(theta0).copy()
    m, J = unit_terms(sample, posteriors.probs, K, theta, model)
    if model.linear:
        JW = J * tau[:, None]
        H = JW.T @ J / N
        if np.linalg.matrix_rank(H) < model.dim:
            raise RankDeficient("mixed regressors are collinear on the trimmed sample")
        theta = _solve_posdef(H, JW.T @ y / N)
        m = J @ theta
        it = 1
    else:
        def obj(mm):
            return float(np.sum(tau * (y - mm) ** 2) / N)

        f = obj(m)
        it = 0
        for it in range(1, max_iter + 1):
            r = y - m
            grad = -2.0 * (J * tau[:, None]).T @ r / N
            if np.linalg.norm(grad) < tol:
                break
            H = (J * tau[:, None]).T @ J / N
            step = _solve_posdef(H, -grad / 2.0)
            lam = 1.0
            for _ in range(31):
                cand = theta + lam * step
                mc, Jc = unit_terms(sample, posteriors.probs, K, cand, model)
                fc = obj(mc)
                if fc <= f:
                    break
                lam *= 0.5
            else:
                raise NoConvergence("step halving failed to decrease the objective")
            theta, m, J, f = cand, mc, Jc, fc
        else:
            raise NoConvergence(f"Gauss-Newton did not converge in {max_iter} iterations")
        H = (J * tau[:, None]).T @ J / N
    resid = y - m
    return ThetaFit(theta_hat=theta, hessian_H=H, meat_Omega=None, cov=None,
                    objective_value=float(np.sum(tau * resid ** 2) / N), n_used=int(used.sum()),
                    jac=J, resid=resid, tau=tau, iterations=it, names=model.names)


def objective_gradient(sample, posteriors, theta, model=DEFAULT_MODEL):
    """Objective N^-1 sum tau (Y - m)^2 and its analytic gradient."""
    m, J = unit_terms(sample, posteriors.probs, posteriors.K, theta, model)
    r = sample.y - m
    tau = posteriors.tau
    N = sample.n
    return float(np.sum(tau * r * r) / N), -2.0 * (J * tau[:, None]).T @ r / N


# -- variance ------------------------------------------------------------------


def sandwich(jac, resid, tau, nbrs, delta=None):
    """(H, Omega, cov) with Omega summed over dependency neighbourhoods.

    ``H = N^-1 sum tau J J'``, ``psi_i = tau_i e_i J_i + delta_i`` and
    ``Omega = N^-1 sum_i sum_{j in Delta(i)} psi_i psi_j'``;
    ``cov = H^-1 Omega H^-1 / N``, symmetrised.
    """
    J = np.asarray(jac, dtype=float)
    N = J.shape[0]
    tau = np.ones(N) if tau is None else np.asarray(tau, dtype=float)
    if not isinstance(nbrs, DepNeighborhoods):
        raise BadArgs("nbrs must be a DepNeighborhoods")
    if nbrs.matrix.shape != (N, N):
        raise BadArgs("neighbourhood matrix does not match the sample size")
    H = (J * tau[:, None]).T @ J / N
    psi = (tau * np.asarray(resid, dtype=float))[:, None] * J
    if delta is not None:
        psi = psi + delta
    M = nbrs.matrix.tocsr()
    Om = kernels.neighborhood_meat(M.indptr, M.indices, psi) / N
    Om = 0.5 * (Om + Om.T)
    try:
        Hi = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian(str(exc)) from None
    if np.linalg.cond(H) > 1e12:
        raise SingularHessian(f"H condition number {np.linalg.cond(H):.3g}")
    cov = Hi @ Om @ Hi / N
    return H, Om, 0.5 * (cov + cov.T)


def sandwich_variance(sample, fit, posteriors, gamma=None, model=DEFAULT_MODEL, nbrs=None,
                      delta=None):
    """Sandwich covariance for a fitted ``ThetaFit``; ``delta`` is the first-stage correction."""
    if nbrs is None:
        nbrs = DepNeighborhoods.identity(sample.n)
    if fit.jac is None:
        m, J = unit_terms(sample, posteriors.probs, posteriors.K, fit.theta_hat, model)
        resid = sample.y - m
    else:
        J, resid = fit.jac, fit.resid
    tau = posteriors.tau if fit.tau is None else fit.tau
    return sandwich(J, resid, tau, nbrs, delta)


# -- effects ---------------------------------------------------------------------


def effects(fit, model, queries):
    """Treatment (``tau_d``) and spillover (``tau_s``) effects with delta-method SEs."""
    out = []
    theta = fit.theta_hat
    for kind, s, z, n in queries:
        if kind == "tau_d":
            a, b = (1, s, z, n), (0, s, z, n)
        elif kind == "tau_s":
            a, b = (0, s, z, n), (0, 0, z, n)
        else:
            raise BadArgs(f"unknown effect kind {kind!r}")
        est = float(model.value(*a, theta) - model.value(*b, theta))
        c = np.asarray(model.jacobian(*a, theta) - model.jacobian(*b, theta), dtype=float)
        se = float(np.sqrt(max(c @ fit.cov @ c, 0.0))) if fit.cov is not None else float("nan")
        out.append(EffectEstimate(kind, int(s), float(z), int(n), est, se, c))
    return out


def effect_truth(theta, model, query):
    kind, s, z, n = query
    if kind == "tau_d":
        return float(model.value(1, s, z, n, theta) - model.value(0, s, z, n, theta))
    return float(model.value(0, s, z, n, theta) - model.value(0, 0, z, n, theta))


# -- comparison estimators ------------------------------------------------------------


def naive_ols(sample, proxy, model=DEFAULT_MODEL, nbrs=None):
    """OLS of Y on the model regressors built from one proxy as if it were the true network."""
    s, deg = sample.proxy(proxy)
    X = model.features(sample.d, s, sample.scalar_z, deg)
    N = sample.n
    if np.linalg.matrix_rank(X) < model.dim:
        raise RankDeficient("naive regressors are collinear")
    theta, *_ = np.linalg.lstsq(X, sample.y, rcond=None)
    resid = sample.y - X @ theta
    nb = DepNeighborhoods.identity(N) if nbrs is None else nbrs
    H, Om, cov = sandwich(X, resid, None, nb)
    return ThetaFit(theta_hat=theta, hessian_H=H, meat_Omega=Om, cov=cov,
                    objective_value=float(resid @ resid / N), n_used=N, jac=X, resid=resid,
                    tau=np.ones(N), names=model.names)


def oracle_ols(sample, model=DEFAULT_MODEL, nbrs=None):
    """Infeasible OLS on the latent exposures (simulated data only)."""
    if sample.s_star is None:
        raise BadArgs("sample carries no latent exposures")
    X = model.features(sample.d, sample.s_star, sample.scalar_z, sample.deg_star)
    theta, *_ = np.linalg.lstsq(X, sample.y, rcond=None)
    resid = sample.y - X @ theta
    nb = DepNeighborhoods.identity(sample.n) if nbrs is None else nbrs
    H, Om, cov = sandwich(X, resid, None, nb)
    return ThetaFit(theta_hat=theta, hessian_H=H, meat_Omega=Om, cov=cov,
                    objective_value=float(resid @ resid / sample.n), n_used=sample.n, jac=X,
                    resid=resid, tau=np.ones(sample.n), names=model.names)


def single_proxy_casf(sample, x, proxy=1, h=None):
    """Nonparametric m(d, s, z, n): the (kernel-weighted) mean of Y in the observed cell."""
    d, s, z, n = x
    g = GammaHat(sample, h=h, main=proxy)
    k = g.z_kernel(np.atleast_1d(z)) * (sample.d == d) * (g.s == s) * (g.deg == n)
    tot = k.sum()
    if tot <= 1e-12:
        raise EmptyCell(f"no units in cell d={d}, s={s}, z={z}, n={n}")
    return float(np.sum(k * sample.y) / tot)


def propensity(d, s, n, p1):
    """Conditional propensity P(D=d, S=s | Z, |N|=n) under independent treatment with P(D=1)=p1.

    Used as an overlap diagnostic for the single-proxy estimator.
    """
    if d not in (0, 1):
        raise BadArgs(f"d must be 0 or 1, got {d!r}")
    return (p1 if d == 1 else 1.0 - p1) * ident.binom_pmf(n, s, p1)


def treatment_share(sample, d, z, h=None):
    """Kernel estimate of P(D = d | Z = z)."""
    g = GammaHat(sample, h=h)
    k = g.z_kernel(np.atleast_1d(z))
    if k.sum() <= 1e-12:
        raise EmptyCell(f"no kernel mass at z={z}")
    return float(np.sum(k * (sample.d == d)) / k.sum())


def effect_queries_paper():
    return [("tau_d", 0, 0.0, 3), ("tau_d", 0, 1.0, 3), ("tau_s", 1, 0.0, 3), ("tau_s", 1, 1.0, 3)]


__all__ = [
    "SPE", "Posteriors", "ThetaFit", "EffectEstimate", "fit_theta", "mixed_mean", "effects",
    "sandwich", "sandwich_variance", "naive_ols", "oracle_ols", "single_proxy_casf",
    "propensity", "treatment_share", "latent_grid", "objective_gradient", "effect_truth", "NetmisError",
]
