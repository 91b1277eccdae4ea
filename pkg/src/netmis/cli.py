"""Command-line entry point: ``netmis {simulate,identify,estimate,montecarlo}``."""

import argparse
import json
import logging
import sys

import numpy as np

from . import estim, harness, ident
from .casf import DEFAULT_MODEL
from .errors import BadArgs, NetmisError
from .kde import default_bandwidth
from .simgen import DepNeighborhoods, simulate

# CLI flag -> flat config key
_FLAG_KEYS = {
    "n": "n", "reps": "reps", "rdeg": "rdeg", "pu": "pu", "pv": "pv", "pomega": "pomega",
    "copula_rho": "copula_rho", "seed": "seed", "mode": "mode", "bandwidth_exp": "bandwidth_exp",
    "pu2": "pu2", "pv2": "pv2", "pomega2": "pomega2", "p_treat": "p_treat",
    "estimators": "estimators", "out": "out",
}


def _design_flags(p, reps=False):
    g = p.add_argument_group("design")
    g.add_argument("--n", type=int, help="number of units (default 1000)")
    g.add_argument("--rdeg", type=float, help="degree scale r_deg (default 5)")
    g.add_argument("--pu", type=float, help="proxy 1 false-negative probability 1-p^U (default 0.2)")
    g.add_argument("--pv", type=float, help="proxy 1 false-positive scale, p^V = pv/n (default 0.1)")
    g.add_argument("--pu2", type=float, help="proxy 2 false-negative probability (default 0.2)")
    g.add_argument("--pv2", type=float, help="proxy 2 false-positive scale (default 0)")
    g.add_argument("--pomega", type=float, help="per-unit misreport probability (default 0.6)")
    g.add_argument("--pomega2", type=float, help="proxy 2 misreport probability (default: --pomega)")
    g.add_argument("--copula-rho", dest="copula_rho", type=float,
                   help="correlation of the two proxies' errors (default 0)")
    g.add_argument("--p-treat", dest="p_treat", type=float, help="treatment probability (default 0.3)")
    g.add_argument("--seed", type=int, help="root seed (default 0)")
    g.add_argument("--config", help="flat key/value or JSON file; flags override it")
    if reps:
        g.add_argument("--reps", type=int, help="Monte Carlo replications (default 200)")


def _mode_flag(p):
    p.add_argument("--mode", choices=("nfn", "nfp"),
                   help="error type of the main proxy: no false negatives / no false positives")
    p.add_argument("--bandwidth-exp", dest="bandwidth_exp", type=float,
                   help="first-stage bandwidth h = N^-exp (default 3/8)")


def build_parser():
    p = argparse.ArgumentParser(prog="netmis", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate one dataset")
    _design_flags(s)
    s.add_argument("--out", help="dataset CSV path")
    s.add_argument("--stats-out", help="write the statistics block as JSON here")

    i = sub.add_parser("identify", help="recover the latent degree components")
    i.add_argument("--data", required=True, help="dataset CSV")
    _mode_flag(i)
    i.add_argument("--main", type=int, choices=(1, 2), default=2, help="one-type proxy (default 2)")
    i.add_argument("--support", default="auto", help="'auto', 'full' or an integer K")
    i.add_argument("--out", help="JSON output (default stdout)")

    e = sub.add_parser("estimate", help="fit theta and effects on a dataset")
    e.add_argument("--data", required=True, help="dataset CSV")
    _mode_flag(e)
    e.add_argument("--estimator", choices=("SPE", "Naive1", "Naive2"), default="SPE")
    e.add_argument("--main", type=int, choices=(1, 2), default=2)
    e.add_argument("--query", action="append", metavar="KIND,S,Z,N",
                   help="effect such as tau_s,1,0,3 (repeatable; default the four standard ones)")
    e.add_argument("--no-correction", action="store_true",
                   help="omit the first-stage term from the SPE variance")
    e.add_argument("--out", help="effects CSV (default stdout)")
    e.add_argument("--theta-out", help="theta CSV")

    m = sub.add_parser("montecarlo", help="simulation study")
    _design_flags(m, reps=True)
    _mode_flag(m)
    m.add_argument("--estimators", help="comma list from SPE,Naive1,Naive2,SingleProxy")
    m.add_argument("--out", help="summary CSV")
    m.add_argument("--raw-out", help="per-replication estimates CSV")
    return p


def _flat_values(args):
    values = harness.load_config(args.config) if getattr(args, "config", None) else {}
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    return values


def _parse_query(text):
    parts = text.split(",")
    if len(parts) != 4 or parts[0] not in ("tau_d", "tau_s"):
        raise BadArgs(f"query {text!r} is not KIND,S,Z,N with KIND tau_d or tau_s")
    return parts[0], int(parts[1]), float(parts[2]), int(parts[3])


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_simulate(args):
    cfg = harness.experiment_from_mapping({**_flat_values(args), "estimators": "Naive1"})
    sim = simulate(cfg.sim)
    if args.out:
        harness.export_dataset(sim.sample, args.out)
    _write_json(sim.stats, args.stats_out)
    return 0


def _support(text):
    if text in ("auto", "full"):
        return text
    try:
        return int(text)
    except ValueError:
        raise BadArgs(f"--support must be auto, full or an integer, got {text!r}") from None


def cmd_identify(args):
    sample, _ = harness.ingest_csv(args.data)
    h = default_bandwidth(sample.n, args.bandwidth_exp or 3.0 / 8.0)
    spe = estim.SPE(sample, args.mode, main=args.main, support=_support(args.support), h=h)
    out = []
    for g, z in enumerate(spe.zkeys):
        L, K, comps, _ = spe.identify(g)
        upper, lower = ident.triangularity_diagnostic(comps.F_main)
        out.append({
            "z": z.tolist(), "window": [L, K],
            "F_main": comps.F_main.tolist(), "F_inst": comps.F_inst.tolist(),
            "f_latent": comps.f_latent.tolist(), "T": comps.T.tolist(),
            "triangularity": {"upper_mass": upper, "lower_mass": lower},
            "quality": {k: float(v) for k, v in comps.quality.items()},
        })
    _write_json(out, args.out)
    return 0


def cmd_estimate(args):
    sample, nbrs = harness.ingest_csv(args.data)
    nbrs = nbrs or DepNeighborhoods.identity(sample.n)
    queries = [_parse_query(q) for q in args.query] if args.query else estim.effect_queries_paper()
    if args.estimator == "SPE":
        h = default_bandwidth(sample.n, args.bandwidth_exp or 3.0 / 8.0)
        spe = estim.SPE(sample, args.mode, main=args.main, h=h)
        fit = spe.fit(nbrs=nbrs, correction=not args.no_correction)
    else:
        fit = estim.naive_ols(sample, int(args.estimator[-1]), nbrs=nbrs)
    eff = estim.effects(fit, DEFAULT_MODEL, queries)
    if args.theta_out:
        harness.export_results(fit, args.theta_out)
    if args.out:
        harness.export_results(eff, args.out)
    else:
        for e in eff:
            print(f"{e.kind}({e.s},{e.z:g},{e.n})\t{e.estimate:.6f}\t{e.std_error:.6f}")
    return 0


def cmd_montecarlo(args):
    cfg = harness.experiment_from_mapping(_flat_values(args))
    summary = harness.run_montecarlo(cfg)
    if args.raw_out:
        harness.export_raw(summary, args.raw_out)
    print(summary.table())
    for rep, name, why in summary.exclusions:
        print(f"excluded rep {rep} ({name}): {why}", file=sys.stderr)
    return 0


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "estimate": cmd_estimate,
            "montecarlo": cmd_montecarlo}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR - 10 * min(args.verbose, 3),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("identify", "estimate") and getattr(args, "estimator", "SPE") == "SPE" \
            and args.mode is None:
        parser.error("SPE needs --mode {nfn,nfp}")
    try:
        values = _flat_values(args) if args.command == "montecarlo" else None
        if values is not None:
            est = values.get("estimators", harness.DEFAULTS["estimators"])
            if "SPE" in str(est).split(",") and values.get("mode") is None:
                parser.error("SPE needs --mode {nfn,nfp}")
        return COMMANDS[args.command](args)
    except BadArgs as exc:
        parser.error(str(exc))
    except (NetmisError, OSError, np.linalg.LinAlgError) as exc:
        print(f"netmis: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
