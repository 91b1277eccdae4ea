"""Synthetic populations: geometric latent network, misreported proxies, outcomes."""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.stats import multivariate_normal, norm

from .casf import THETA_PAPER, default_features
from .data import Sample
from .errors import BadArgs

STREAMS = ("positions", "z", "zeta", "proxies", "treatment", "noise")


@dataclass(frozen=True)
class MisclassModel:
    """Misreporting of one proxy.

    ``p_u_miss`` is the per-link false-negative probability 1 - p^U and
    ``p_v_rate`` the false-positive scale, so that p^V = p_v_rate / n.
    ``copula_rho`` correlates this proxy's error draws with the other
    proxy's (only the first proxy's value is read).
    """

    p_omega: float = 0.0
    p_u_miss: float = 0.0
    p_v_rate: float = 0.0
    copula_rho: float = 0.0

    def p_false_pos(self, n):
        return self.p_v_rate / n

    def validate(self, n):
        for name in ("p_omega", "p_u_miss"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BadArgs(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.p_false_pos(n) <= 1.0:
            raise BadArgs(f"p_v_rate / n = {self.p_false_pos(n)} outside [0, 1]")
        if not -1.0 < self.copula_rho < 1.0:
            raise BadArgs("copula_rho must lie in (-1, 1)")


def decaying_error_model(n, delta, p_omega=0.6, scale=50.0):
    """Single-proxy design with 1 - p^U = n^-delta and p^V = scale * n^(-delta-1)."""
    return MisclassModel(p_omega=p_omega, p_u_miss=n ** -delta, p_v_rate=scale * n ** -delta)


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    r_deg: float = 5.0
    beta: tuple = (-0.25, 0.5, -1.0)
    theta_true: tuple = THETA_PAPER
    p_treat: float = 0.3
    proxy1: MisclassModel = field(default_factory=lambda: MisclassModel(0.6, 0.2, 0.1))
    proxy2: MisclassModel = field(default_factory=lambda: MisclassModel(0.6, 0.2, 0.0))
    seed: int = 0
    p_z: float = 0.5
    eps_idio_sd: float = 1.0
    peer_var: float = 0.5
    symmetric_proxies: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise BadArgs("n must be at least 2")
        if not 0.0 <= self.p_treat <= 1.0:
            raise BadArgs("p_treat must lie in [0, 1]")
        self.proxy1.validate(self.n)
        self.proxy2.validate(self.n)

    @property
    def radius(self):
        return np.sqrt(self.r_deg / self.n)


@dataclass(frozen=True)
class LatentNetwork:
    n: int
    adjacency: sparse.csr_matrix
    positions: np.ndarray


@dataclass(frozen=True)
class DepNeighborhoods:
    """Symmetric dependency neighbourhoods stored as a boolean CSR matrix with unit diagonal."""

    matrix: sparse.csr_matrix

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def sets(self):
        m = self.matrix
        return [m.indices[m.indptr[i]:m.indptr[i + 1]] for i in range(self.n)]

    def is_symmetric(self):
        return (self.matrix != self.matrix.T).nnz == 0

    @classmethod
    def identity(cls, n):
        return cls(sparse.identity(n, dtype=np.int8, format="csr"))

    @classmethod
    def from_clusters(cls, labels):
        labels = np.asarray(labels)
        _, codes = np.unique(labels, return_inverse=True)
        member = sparse.csr_matrix(
            (np.ones(len(codes), dtype=np.int8), (np.arange(len(codes)), codes))
        )
        m = (member @ member.T).tocsr()
        m.data[:] = 1
        m.sort_indices()
        return cls(m)

    @classmethod
    def from_sets(cls, sets):
        rows = np.concatenate([np.full(len(s), i) for i, s in enumerate(sets)])
        cols = np.concatenate([np.asarray(s, dtype=np.int64) for s in sets])
        n = len(sets)
        m = sparse.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
        m.sum_duplicates()
        m.data[:] = 1
        m.sort_indices()
        return cls(m)


def spawn_streams(seed):
    """Independent generators keyed by component name."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, ss.spawn(len(STREAMS)))}


def gen_positions(n, rng):
    return rng.random((n, 2))


def _close_pairs(positions, r):
    if len(positions) < 2:
        return np.empty((0, 2), dtype=np.int64)
    pairs = cKDTree(positions).query_pairs(r, p=1, output_type="ndarray")
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order].astype(np.int64)


def _symmetric(n, i, j):
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    m = sparse.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    m.sort_indices()
    return m


def gen_latent_network(positions, Z, beta, r_deg, rng):
    """Links between units within L1 distance r = sqrt(r_deg / n) that pass the probit rule."""
    positions = np.asarray(positions, dtype=float)
    Z = np.asarray(Z, dtype=float).reshape(-1)
    n = len(positions)
    if len(Z) != n:
        raise BadArgs("Z and positions must have the same length")
    b1, b2, b3 = beta
    if b3 >= 0:
        raise BadArgs("beta_3 must be negative so that distant pairs never link")
    r = np.sqrt(r_deg / n) if n else 0.0
    pairs = _close_pairs(positions, r)
    zeta = rng.standard_normal(len(pairs))
    i, j = pairs[:, 0], pairs[:, 1]
    keep = b1 + b2 * (Z[i] + Z[j]) + zeta > 0
    return LatentNetwork(n=n, adjacency=_symmetric(n, i[keep], j[keep]), positions=positions)


def _sample_unlinked_pairs(n, k, linked_keys, rng, ordered=False):
    """k distinct pairs drawn uniformly from those not in ``linked_keys``.

    Unordered pairs are returned as (i, j) with i < j; ordered pairs as any
    (i, j) with i != j. Keys are ``i * n + j``.
    """
    chosen = []
    seen = set()
    while len(chosen) < k:
        m = 2 * (k - len(chosen)) + 8
        a = rng.integers(0, n, size=m)
        b = rng.integers(0, n, size=m)
        for x, y in zip(a.tolist(), b.tolist()):
            if x == y:
                continue
            i, j = (x, y) if (ordered or x < y) else (y, x)
            key = i * n + j
            if key in seen or key in linked_keys:
                continue
            seen.add(key)
            chosen.append((i, j))
            if len(chosen) == k:
                break
    if not chosen:
        return np.empty((0, 2), dtype=np.int64)
    return np.array(chosen, dtype=np.int64)


def _false_negative_draws(m1, m2, size, rng):
    """Uniforms behind U and U~; jointly normal through a Gaussian copula when rho != 0."""
    rho = m1.copula_rho
    if rho == 0.0:
        return rng.random(size), rng.random(size)
    g = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], size=size)
    return norm.cdf(g[:, 0]), norm.cdf(g[:, 1])


def _false_positive_split(pv1, pv2, rho):
    """P(V=1, V~=0), P(V=0, V~=1), P(V=1, V~=1) under the copula."""
    if rho == 0.0 or pv1 == 0.0 or pv2 == 0.0:
        p11 = pv1 * pv2
    else:
        p11 = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf(
            [norm.ppf(pv1), norm.ppf(pv2)]
        )
    return pv1 - p11, pv2 - p11, p11


def perturb_network(latent, m1, m2, rng, symmetric=False):
    """Two misreported copies of the latent network.

    By default every unit reports its own row: entry (i, j) is misreported
    only when unit i's flag omega_i is on, so the proxies are directed and a
    unit's proxy degree is its row sum. With ``symmetric=True`` each
    unordered pair (i, j), i < j, is perturbed using the flag of unit i and
    mirrored, keeping both proxies undirected. Returns ``(A1, A2, info)``
    where ``info`` counts flipped ordered entries.
    """
    n = latent.n
    m1.validate(n)
    m2.validate(n)
    rho = m1.copula_rho
    base = sparse.triu(latent.adjacency, k=1) if symmetric else latent.adjacency
    base = base.tocoo()
    li, lj = base.row.astype(np.int64), base.col.astype(np.int64)
    order = np.lexsort((lj, li))
    li, lj = li[order], lj[order]
    n_links = len(li)

    omega1 = rng.random(n) < m1.p_omega
    omega2 = rng.random(n) < m2.p_omega

    # false negatives on latent links: U = 1[Phi(U*) < 1 - p_u_miss]
    u1, u2 = _false_negative_draws(m1, m2, n_links, rng)
    drop1 = omega1[li] & (u1 >= 1.0 - m1.p_u_miss)
    drop2 = omega2[li] & (u2 >= 1.0 - m2.p_u_miss)

    # false positives among unlinked pairs, sampled sparsely from the exact joint law
    p10, p01, p11 = _false_positive_split(m1.p_false_pos(n), m2.p_false_pos(n), rho)
    p_any = p10 + p01 + p11
    n_pairs = n * (n - 1) // 2 if symmetric else n * (n - 1)
    n_unlinked = n_pairs - n_links
    k = rng.binomial(n_unlinked, p_any) if p_any > 0 and n_unlinked > 0 else 0
    fp = _sample_unlinked_pairs(n, k, set((li * n + lj).tolist()), rng, ordered=not symmetric)
    if k:
        cat = rng.choice(3, size=k, p=np.array([p10, p01, p11]) / p_any)
        v1 = (cat == 0) | (cat == 2)
        v2 = (cat == 1) | (cat == 2)
    else:
        v1 = v2 = np.zeros(0, dtype=bool)
    fi, fj = fp[:, 0], fp[:, 1]
    add1 = omega1[fi] & v1
    add2 = omega2[fi] & v2

    def build(drop, add):
        keep = ~drop
        i = np.concatenate([li[keep], fi[add]])
        j = np.concatenate([lj[keep], fj[add]])
        if symmetric:
            return _symmetric(n, i, j)
        m = sparse.csr_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n, n))
        m.sort_indices()
        return m

    A1, A2 = build(drop1, add1), build(drop2, add2)
    w = 2 if symmetric else 1
    info = {
        "proxy1": {"one_to_zero": w * int(drop1.sum()), "zero_to_one": w * int(add1.sum())},
        "proxy2": {"one_to_zero": w * int(drop2.sum()), "zero_to_one": w * int(add2.sum())},
    }
    return A1, A2, info


def gen_treatment(n, p_treat, rng):
    return (rng.random(n) < p_treat).astype(np.int64)


def network_stats(adjacency, D):
    """Degree and treated-neighbour count per unit."""
    A = sparse.csr_matrix(adjacency)
    D = np.asarray(D)
    deg = np.asarray(A.sum(axis=1)).ravel().astype(np.int64)
    S = np.asarray(A @ D).ravel().astype(np.int64)
    return deg, S


def gen_outcomes(D, Z, latent, theta_true, rng, eps_idio_sd=1.0, peer_var=0.5):
    """Outcomes from the latent exposures plus idiosyncratic and shared peer shocks."""
    D = np.asarray(D)
    Z = np.asarray(Z, dtype=float).reshape(-1)
    deg, S = network_stats(latent.adjacency, D)
    mean = default_features(D, S, Z, deg) @ np.asarray(theta_true, dtype=float)
    n = len(D)
    idio = rng.standard_normal(n)
    v = rng.standard_normal(n)
    peer = latent.adjacency @ v
    return mean + eps_idio_sd * idio + np.sqrt(peer_var) * peer


def build_dep_neighborhoods(positions, r):
    """Units within L1 distance r of each other (each unit included in its own set)."""
    if r < 0:
        raise BadArgs("r must be nonnegative")
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    pairs = _close_pairs(positions, r)
    i = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    j = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    m = sparse.csr_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n, n))
    m.sort_indices()
    return DepNeighborhoods(m)


@dataclass(frozen=True)
class SimResult:
    config: SimConfig
    sample: Sample
    latent: LatentNetwork
    proxy1: sparse.csr_matrix
    proxy2: sparse.csr_matrix
    neighborhoods: DepNeighborhoods
    stats: dict


def _degree_block(deg, S):
    return {
        "deg_avg": float(deg.mean()),
        "deg_max": int(deg.max()) if len(deg) else 0,
        "s_avg": float(S.mean()),
        "s_max": int(S.max()) if len(S) else 0,
        "links": int(deg.sum()),
    }


def simulate(config, seed=None):
    """One synthetic dataset. ``seed`` (int or SeedSequence) overrides ``config.seed``."""
    streams = spawn_streams(config.seed if seed is None else seed)
    n = config.n
    positions = gen_positions(n, streams["positions"])
    Z = (streams["z"].random(n) < config.p_z).astype(float)
    latent = gen_latent_network(positions, Z, config.beta, config.r_deg, streams["zeta"])
    A1, A2, info = perturb_network(
        latent, config.proxy1, config.proxy2, streams["proxies"], symmetric=config.symmetric_proxies
    )
    D = gen_treatment(n, config.p_treat, streams["treatment"])
    Y = gen_outcomes(
        D, Z, latent, config.theta_true, streams["noise"], config.eps_idio_sd, config.peer_var
    )
    deg_star, s_star = network_stats(latent.adjacency, D)
    deg1, s1 = network_stats(A1, D)
    deg2, s2 = network_stats(A2, D)
    sample = Sample(
        y=Y, d=D, z=Z[:, None], s1=s1, deg1=deg1, s2=s2, deg2=deg2,
        positions=positions, s_star=s_star, deg_star=deg_star, z_names=("z",),
    )
    latent_links = int(deg_star.sum())
    stats = {"latent": _degree_block(deg_star, s_star)}
    for k, (deg, S) in ((1, (deg1, s1)), (2, (deg2, s2))):
        block = _degree_block(deg, S)
        flips = info[f"proxy{k}"]
        total = flips["one_to_zero"] + flips["zero_to_one"]
        block.update(flips)
        block["misclassified"] = total
        block["ratio"] = total / latent_links if latent_links else 0.0
        stats[f"proxy{k}"] = block
    nbrs = build_dep_neighborhoods(positions, config.radius)
    return SimResult(config, sample, latent, A1, A2, nbrs, stats)
