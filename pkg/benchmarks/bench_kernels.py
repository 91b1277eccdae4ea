"""Time the compiled kernels against the numpy fallback.

Run from the repository root after building the extension::

    python benchmarks/bench_kernels.py [--repeat 20]

Both backends are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from netmis import _kernels_py

try:
    from netmis import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _cases(rng):
    K = 14
    F = np.triu(rng.random((K, K)))
    F /= F.sum(axis=0)
    fstar = rng.dirichlet(np.ones(K))
    fN = F @ fstar
    N = 4000
    pos = rng.random((N, 2))
    # dependency neighbourhoods from a band of nearby indices after sorting on x
    order = np.argsort(pos[:, 0])
    rows, cols = [], []
    for lag in range(-6, 7):
        i = np.arange(max(0, -lag), min(N, N - lag))
        rows.append(order[i])
        cols.append(order[i + lag])
    from scipy import sparse

    A = sparse.csr_matrix((np.ones(sum(len(r) for r in rows)), (np.concatenate(rows),
                           np.concatenate(cols))), shape=(N, N))
    A.sort_indices()
    G = rng.standard_normal((N, 7))
    X = rng.random((N, 3))
    return {
        "posterior_table": ((F, fstar, fN, 0.3, 1), {}),
        "neighborhood_meat": ((A.indptr.astype(np.int32), A.indices.astype(np.int32), G), {}),
        "gaussian_weights": ((X, np.array([0.5, 0.5, 0.5]), 0.2), {}),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fit", action="store_true", help="also time a full SPE fit")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; only the numpy fallback is available")
    cases = _cases(np.random.default_rng(args.seed))
    print(f"{'kernel':<20s}{'numpy [ms]':>12s}{'cython [ms]':>13s}{'speedup':>9s}")
    for name, (a, kw) in cases.items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        if _kernels_c is None:
            print(f"{name:<20s}{t_py:12.3f}{'-':>13s}{'-':>9s}")
            continue
        c = getattr(_kernels_c, name)
        np.testing.assert_allclose(c(*a, **kw), py(*a, **kw), rtol=1e-10, atol=1e-12)
        t_c = min(timeit.repeat(lambda: c(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20s}{t_py:12.3f}{t_c:13.3f}{t_py / t_c:9.1f}")
    if args.fit:
        _bench_fit(args.seed)


def _bench_fit(seed):
    """One SPE fit with the variance correction on a simulated N=1000 sample, per backend."""
    import time

    from netmis import estim, kernels, simgen

    sim = simgen.simulate(simgen.SimConfig(seed=seed))
    impls = [("numpy", _kernels_py)] + ([("cython", _kernels_c)] if _kernels_c else [])
    saved = kernels._impl
    try:
        for label, impl in impls:
            kernels._impl = impl
            t = time.perf_counter()
            estim.SPE(sim.sample, "nfp").fit(nbrs=sim.neighborhoods)
            print(f"SPE fit ({label}): {time.perf_counter() - t:.3f} s")
    finally:
        kernels._impl = saved


if __name__ == "__main__":
    main()
