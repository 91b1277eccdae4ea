import itertools

import numpy as np
import pytest

from netmis import ident
from netmis.errors import AmbiguousOrdering, BadArgs, ComplexSpectrum, NonIdentified, SingularInput
from netmis.ident import (
    IdentComponents,
    binom_pmf,
    build_observed_matrices,
    eigen_recover,
    latent_posterior,
    lexi_index,
    lexi_pairs,
    one_type_kernel,
    triangularity_diagnostic,
)
from netmis.kde import GammaHat
from netmis.data import Sample


# -- enumeration oracles -------------------------------------------------------------


def enum_binom(n, s, p):
    total = 0.0
    for pat in itertools.product((0, 1), repeat=n):
        if sum(pat) == s:
            total += np.prod([p if t else 1 - p for t in pat])
    return total


def enum_kernel(s, s_star, n, n_star, p, mode):
    """Condition on the treated count of the common links, enumerate the rest."""
    small, big = (n_star, n) if mode == "nfn" else (n, n_star)
    s_small, s_big = (s_star, s) if mode == "nfn" else (s, s_star)
    if small > big or s_small > small or s_big > big:
        return 0.0
    num = den = 0.0
    for pat in itertools.product((0, 1), repeat=big):
        w = np.prod([p if t else 1 - p for t in pat])
        if sum(pat[:small]) == s_small:
            den += w
            if sum(pat) == s_big:
                num += w
    return num / den if den > 0 else 0.0


def forward_model(rng, K=4):
    """Column-stochastic, diagonally dominant F's; distinct T; f bounded away from 0."""
    def stoch():
        a = rng.uniform(0.55, 0.8, K)
        R = rng.dirichlet(np.ones(K), size=K).T
        return a * np.eye(K) + (1 - a) * R

    F_inst, F_main = stoch(), stoch()
    while True:
        T = rng.uniform(0.5, 5.0, K)
        if np.min(np.diff(np.sort(T))) >= 0.1:
            break
    f = 0.05 + (1 - 0.05 * K) * rng.dirichlet(np.ones(K))
    E = F_inst @ np.diag(f * T) @ F_main.T
    F_joint = F_inst @ np.diag(f) @ F_main.T
    return F_inst, F_main, f, T, E, F_joint


# -- kernels ---------------------------------------------------------------------------


def test_binom_pmf_examples():
    assert binom_pmf(2, 1, 0.3) == pytest.approx(0.42, abs=1e-15)
    for n in range(21):
        assert sum(binom_pmf(n, s, 0.37) for s in range(n + 1)) == pytest.approx(1.0, abs=1e-12)
    assert abs(binom_pmf(5, 2, 0.3) - enum_binom(5, 2, 0.3)) < 1e-12
    with pytest.raises(BadArgs):
        binom_pmf(2, 3, 0.3)
    with pytest.raises(BadArgs):
        binom_pmf(2, 1, 1.3)


def test_one_type_kernel_examples():
    for s in range(4):
        for ss in range(4):
            assert one_type_kernel(s, ss, 3, 3, 0.3, "nfn") == float(s == ss)
    assert one_type_kernel(2, 1, 4, 2, 0.3, "nfn") == pytest.approx(0.42)
    assert one_type_kernel(0, 1, 4, 2, 0.3, "nfn") == 0.0


@pytest.mark.parametrize("mode", ["nfn", "nfp"])
def test_one_type_kernel_enumeration(mode):
    p = 0.3
    for n in range(6):
        for n_star in range(6):
            for s in range(n + 1):
                for s_star in range(n_star + 1):
                    got = one_type_kernel(s, s_star, n, n_star, p, mode)
                    assert abs(got - enum_kernel(s, s_star, n, n_star, p, mode)) < 1e-12


def test_one_type_kernel_sums_and_duality():
    p = 0.27
    for K in range(1, 11):
        for n_star in range(K):
            for n in range(n_star, K):
                for s_star in range(n_star + 1):
                    tot = sum(one_type_kernel(s, s_star, n, n_star, p, "nfn") for s in range(n + 1))
                    assert tot == pytest.approx(1.0, abs=1e-12)
                    # the no-false-positive kernel sums over s* for fixed (s, n <= n*)
    for n in range(8):
        for n_star in range(n, 8):
            for s in range(n + 1):
                tot = sum(one_type_kernel(s, ss, n, n_star, p, "nfp") for ss in range(n_star + 1))
                assert tot == pytest.approx(1.0, abs=1e-12)
                for ss in range(n_star + 1):
                    assert one_type_kernel(s, ss, n, n_star, p, "nfp") == \
                        one_type_kernel(ss, s, n_star, n, p, "nfn")


def test_mode_names():
    assert ident.mode_code("no_false_negative") == 0 == ident.mode_code("a")
    assert ident.mode_code("no_false_positive") == 1
    with pytest.raises(BadArgs):
        ident.mode_code("both")


# -- lexicographic support -------------------------------------------------------------


def test_lexi_examples_and_bijection():
    assert lexi_index(0, 0, 3) == 0
    assert lexi_index(1, 1, 3) == 2
    s, n = lexi_pairs(6)
    assert list(zip(s[:4], n[:4])) == [(0, 0), (0, 1), (1, 1), (0, 2)]
    idx = [lexi_index(a, b, 6) for a, b in zip(s, n)]
    assert idx == list(range(21))
    with pytest.raises(BadArgs):
        lexi_index(2, 1, 6)
    with pytest.raises(BadArgs):
        lexi_index(0, 6, 6)


# -- observed matrices ---------------------------------------------------------------------


def _toy_sample(rng, n=400, y=None):
    deg2 = rng.integers(0, 3, n)
    deg1 = np.minimum(deg2 + rng.integers(0, 2, n), 2)
    s2 = rng.binomial(deg2, 0.3)
    s1 = np.minimum(s2, deg1)
    yy = rng.standard_normal(n) if y is None else np.full(n, y)
    return Sample(y=yy, d=rng.integers(0, 2, n), z=np.zeros(n), s1=s1, deg1=deg1, s2=s2, deg2=deg2)


def test_observed_matrices(rng):
    g = GammaHat(_toy_sample(rng, y=1.0))
    E, F, fm = build_observed_matrices(g, [0.0], 3)
    assert np.allclose(E, F)
    assert F.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(fm, F.sum(axis=0))
    g1 = GammaHat(_toy_sample(rng, y=2.5))
    E, F, _ = build_observed_matrices(g1, [0.0], 1)
    assert F.shape == (1, 1) and F[0, 0] == pytest.approx(1.0) and E[0, 0] == pytest.approx(2.5)


def test_observed_matrices_singular(rng):
    s = _toy_sample(rng)
    s0 = Sample(y=s.y, d=s.d, z=s.z, s1=np.zeros(s.n, int), deg1=np.zeros(s.n, int),
                s2=s.s2, deg2=s.deg2)
    with pytest.raises(SingularInput):
        build_observed_matrices(GammaHat(s0), [0.0], 3)


# -- eigen recovery ------------------------------------------------------------------------


def test_identity_system():
    K = 3
    E = np.diag([1.0, 2.0, 3.0]) / 3
    F = np.eye(K) / 3
    c = eigen_recover(E, F)
    assert np.allclose(c.F_main, np.eye(K)) and np.allclose(c.F_inst, np.eye(K))
    assert np.allclose(c.T, [1, 2, 3])
    assert np.allclose(c.f_latent, 1 / 3)


def test_forward_oracle_generic(rng):
    for _ in range(50):
        Fi, Fm, f, T, E, Fj = forward_model(rng)
        c = eigen_recover(E, Fj, K=4)
        for got, want in ((c.F_inst, Fi), (c.F_main, Fm), (c.f_latent, f), (c.T, T)):
            assert np.max(np.abs(got - want)) < 1e-8
        assert c.quality["clipped_mass"] < 1e-10


@pytest.mark.parametrize("upper", [True, False])
def test_forward_oracle_triangular(rng, upper):
    K = 5
    for _ in range(20):
        Fi, _, f, T, _, _ = forward_model(rng, K)
        Fm = np.triu(rng.random((K, K))) if upper else np.tril(rng.random((K, K)))
        Fm += 3 * np.eye(K)
        Fm /= Fm.sum(axis=0)
        E = Fi @ np.diag(f * T) @ Fm.T
        Fj = Fi @ np.diag(f) @ Fm.T
        c = eigen_recover(E, Fj, triangular="upper" if upper else "lower")
        assert np.max(np.abs(c.F_main - Fm)) < 1e-8
        assert np.max(np.abs(c.F_inst - Fi)) < 1e-8
        assert np.max(np.abs(c.f_latent - f)) < 1e-8
        assert np.max(np.abs(c.T - T)) < 1e-8
        up, lo = triangularity_diagnostic(c.F_main)
        assert (lo if upper else up) < 1e-8


def test_ordering_invariance(rng):
    Fi, *_ = forward_model(rng)
    perm = rng.permutation(4)
    order, coll = ident._order_columns(Fi[:, perm], "assignment")
    assert coll == 0
    assert np.allclose(Fi[:, perm][:, order], Fi)


def test_ordering_collision():
    V = np.array([[0.6, 0.5], [0.4, 0.5]])
    with pytest.raises(AmbiguousOrdering):
        ident._order_columns(V, "strict")
    order, coll = ident._order_columns(V, "assignment")
    assert coll == 1 and sorted(order) == [0, 1]


def test_complex_spectrum():
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(ComplexSpectrum):
        eigen_recover(R, np.eye(2))


def test_repeated_eigenvalues():
    with pytest.raises(NonIdentified):
        eigen_recover(np.eye(3), np.eye(3))


def test_singular_joint():
    with pytest.raises(SingularInput):
        eigen_recover(np.ones((2, 2)), np.ones((2, 2)) / 4)


def test_clipping_recorded(rng):
    Fi, Fm, f, T, E, Fj = forward_model(rng)
    noisy = E + 0.02 * rng.standard_normal(E.shape)
    c = eigen_recover(noisy, Fj)
    assert ident.check_stochastic(c.F_main) and ident.check_stochastic(c.F_inst)
    assert c.f_latent.sum() == pytest.approx(1.0, abs=1e-8)
    assert c.quality["clipped_mass"] >= 0


def test_triangularity_examples():
    assert triangularity_diagnostic(np.eye(3)) == (0.0, 0.0)
    L = np.array([[0.5, 0.0], [0.5, 1.0]])
    assert triangularity_diagnostic(L)[0] == 0.0


# -- posterior -------------------------------------------------------------------------------


def _components(F_main, f):
    K = len(f)
    return IdentComponents(F_main=F_main, F_inst=np.eye(K), f_latent=f, T=np.arange(K, dtype=float),
                           f_n=F_main @ f)


def bayes_posterior(F, f, p, mode, s, n):
    """Brute-force posterior over (s*, n*) from the joint law of the simulation model."""
    K = len(f)
    ss, nn = lexi_pairs(K)
    w = np.zeros(len(ss))
    for j, (a, b) in enumerate(zip(ss, nn)):
        if mode == "nfp":
            # kept links out of b latent, treated among the dropped ones
            if n > b or s > a or a - s > b - n:
                continue
            w[j] = f[b] * F[n, b] * binom_pmf(n, s, p) * binom_pmf(b - n, a - s, p)
        else:
            if b > n or a > s or s - a > n - b:
                continue
            w[j] = f[b] * binom_pmf(b, a, p) * F[n, b] * binom_pmf(n - b, s - a, p)
    return w / w.sum(), w.sum() / (binom_pmf(n, s, p) * (F @ f)[n])


@pytest.mark.parametrize("mode", ["nfp", "nfn"])
def test_posterior_matches_bayes(rng, mode):
    K = 6
    F = np.triu(rng.random((K, K))) if mode == "nfp" else np.tril(rng.random((K, K)))
    F += np.eye(K)
    F /= F.sum(axis=0)
    f = rng.dirichlet(np.ones(K))
    comps = _components(F, f)
    for n in range(K):
        for s in range(n + 1):
            post = latent_posterior((0, s, 0.0, n), comps, 0.3, mode, eps=0.0)
            want, total = bayes_posterior(F, f, 0.3, mode, s, n)
            assert np.max(np.abs(post.probs - want)) < 1e-8
            assert post.pre_total == pytest.approx(total, abs=1e-6)
            assert post.probs.sum() == pytest.approx(1.0, abs=1e-10)


def test_posterior_identity_is_point_mass():
    K = 5
    comps = _components(np.eye(K), np.full(K, 0.2))
    for mode in ("nfn", "nfp"):
        post = latent_posterior((1, 2, 0.0, 3), comps, 0.3, mode)
        assert post.probs[lexi_index(2, 3, K)] == pytest.approx(1.0)
        assert post.expected_s() == pytest.approx(2.0)


def test_posterior_feasibility_structure():
    # no false negatives; latent degree is n-1 or n
    K, n, s = 5, 3, 1
    F = np.eye(K)
    F[n, n - 1] = 0.5
    F[n - 1, n - 1] = 0.5
    comps = _components(F, np.full(K, 0.2))
    post = latent_posterior((0, s, 0.0, n), comps, 0.3, "nfn")
    ss, nn = lexi_pairs(K)
    support = {(int(a), int(b)) for a, b, p in zip(ss, nn, post.probs) if p > 0}
    # s* in {s-1, s}, and the s - s* extra treated links need s - s* <= n - n*
    allowed = {(a, b) for b in (n - 1, n) for a in (s - 1, s) if 0 <= a <= b and s - a <= n - b}
    assert support <= allowed and len(support) == len(allowed)


def test_posterior_thin_cell():
    K = 3
    comps = _components(np.eye(K), np.array([0.9995, 0.0005, 0.0]))
    with pytest.raises(ident.ThinCell):
        latent_posterior((0, 0, 0.0, 1), comps, 0.3, "nfp")
    with pytest.raises(BadArgs):
        latent_posterior((0, 0, 0.0, 5), comps, 0.3, "nfp")


def test_embed_window():
    K = 3
    c = _components(np.eye(K), np.full(K, 1 / 3))
    e = ident.embed(c, 2)
    assert e.K == 5
    assert np.allclose(e.f_latent[:2], 0) and np.allclose(e.F_main[:2, :2], np.eye(2))
