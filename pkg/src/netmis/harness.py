"""Monte Carlo runner, configuration files and CSV input/output."""

import configparser
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import estim
from .casf import DEFAULT_MODEL
from .data import Sample
from .errors import BadArgs, IntegrityError, NetmisError, SchemaError
from .kde import default_bandwidth
from .simgen import DepNeighborhoods, MisclassModel, SimConfig, simulate

log = logging.getLogger(__name__)

ESTIMATORS = ("SPE", "Naive1", "Naive2", "SingleProxy")
BASE_COLUMNS = ("y", "d", "s1", "deg1", "s2", "deg2")
CLUSTER_COLUMN = "cluster_id"


# -- configuration ---------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """One Monte Carlo design.

    ``mode`` is the error type of the main proxy (proxy 2) and must be set
    whenever SPE is requested. ``bandwidth_exp`` gives h = N^-bandwidth_exp.
    """

    sim: SimConfig = field(default_factory=SimConfig)
    reps: int = 200
    bandwidth_exp: float = 3.0 / 8.0
    mode: str | None = None
    queries: list = field(default_factory=estim.effect_queries_paper)
    estimators: tuple = ("SPE", "Naive1", "Naive2")
    out: str | None = None
    correction: bool = True
    spe_options: dict = field(default_factory=dict)

    def validate(self):
        if self.reps < 1:
            raise BadArgs("reps must be at least 1")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise BadArgs(f"unknown estimator(s) {sorted(unknown)}; choose from {ESTIMATORS}")
        if "SPE" in self.estimators and self.mode not in ("nfn", "nfp"):
            raise BadArgs("SPE needs the one-type error mode of the main proxy (nfn or nfp)")
        if self.bandwidth_exp <= 0:
            raise BadArgs("bandwidth exponent must be positive")
        return self


# flat keys accepted in config files and their types
_KEYS = {
    "n": int, "reps": int, "rdeg": float, "pu": float, "pv": float, "pomega": float,
    "copula_rho": float, "seed": int, "mode": str, "bandwidth_exp": float, "pu2": float,
    "pv2": float, "pomega2": float, "p_treat": float, "eps_sd": float, "peer_var": float,
    "symmetric_proxies": bool, "estimators": str, "out": str, "correction": bool,
}

DEFAULTS = {
    "n": 1000, "reps": 200, "rdeg": 5.0, "pu": 0.2, "pv": 0.1, "pomega": 0.6,
    "copula_rho": 0.0, "seed": 0, "mode": None, "bandwidth_exp": 3.0 / 8.0, "pu2": 0.2,
    "pv2": 0.0, "pomega2": None, "p_treat": 0.3, "eps_sd": 1.0, "peer_var": 0.5,
    "symmetric_proxies": False, "estimators": "SPE,Naive1,Naive2", "out": None,
    "correction": True,
}


def _coerce(key, value):
    if key not in _KEYS:
        raise BadArgs(f"unknown configuration key {key!r}")
    if value is None:
        return None
    typ = _KEYS[key]
    if typ is bool:
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise BadArgs(f"{key}: expected a boolean, got {value!r}")
    if typ is str and isinstance(value, (list, tuple)):
        return ",".join(map(str, value))
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise BadArgs(f"{key}: cannot read {value!r} as {typ.__name__}") from None


def load_config(path):
    """Read a flat key/value file: JSON object, or ``key = value`` lines."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise BadArgs(f"{path}: {exc}") from None
        if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
            raise BadArgs(f"{path}: config must be a flat object")
    else:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string("[netmis]\n" + text, source=str(path))
        except configparser.Error as exc:
            raise BadArgs(f"{path}: {exc}") from None
        raw = dict(cp["netmis"])
    return {k.replace("-", "_"): _coerce(k.replace("-", "_"), v) for k, v in raw.items()}


def experiment_from_mapping(values):
    """ExperimentConfig from flat keys; missing keys take ``DEFAULTS``."""
    v = dict(DEFAULTS)
    v.update({k: _coerce(k, x) for k, x in values.items() if x is not None})
    pomega2 = v["pomega"] if v["pomega2"] is None else v["pomega2"]
    sim = SimConfig(
        n=v["n"], r_deg=v["rdeg"], p_treat=v["p_treat"], seed=v["seed"],
        proxy1=MisclassModel(v["pomega"], v["pu"], v["pv"], v["copula_rho"]),
        proxy2=MisclassModel(pomega2, v["pu2"], v["pv2"], 0.0),
        eps_idio_sd=v["eps_sd"], peer_var=v["peer_var"],
        symmetric_proxies=v["symmetric_proxies"],
    )
    est = tuple(e.strip() for e in v["estimators"].split(",") if e.strip())
    return ExperimentConfig(sim=sim, reps=v["reps"], bandwidth_exp=v["bandwidth_exp"],
                            mode=v["mode"], estimators=est, out=v["out"],
                            correction=v["correction"]).validate()


# -- Monte Carlo -------------------------------------------------------------------


def replication_seed(root, rep):
    """Substream for replication ``rep``; independent of how many replications run."""
    return np.random.SeedSequence(entropy=int(root), spawn_key=(int(rep),))


def true_effects(config, model=DEFAULT_MODEL):
    theta = np.asarray(config.sim.theta_true, dtype=float)
    stub = estim.ThetaFit(theta_hat=theta, hessian_H=None, meat_Omega=None, cov=None,
                          objective_value=0.0, n_used=0)
    return np.array([e.estimate for e in estim.effects(stub, model, config.queries)])


def _cell_mean(sample, x, proxy, h):
    """Kernel cell mean with its standard error (effective sample size)."""
    d, s, z, n = x
    g = estim.GammaHat(sample, h=h, main=proxy)
    k = g.z_kernel(np.atleast_1d(z)) * (sample.d == d) * (g.s == s) * (g.deg == n)
    tot = k.sum()
    if tot <= 1e-12:
        raise estim.EmptyCell(f"no units in cell d={d}, s={s}, z={z}, n={n}")
    mu = float(np.sum(k * sample.y) / tot)
    var = float(np.sum(k * (sample.y - mu) ** 2) / tot)
    n_eff = tot * tot / float(np.sum(k * k))
    return mu, var / n_eff


def single_proxy_effects(sample, queries, proxy=1, h=None):
    """Effects as differences of single-proxy cell means, with independent-cell SEs."""
    out = []
    for kind, s, z, n in queries:
        if kind == "tau_d":
            a, b = (1, s, z, n), (0, s, z, n)
        else:
            a, b = (0, s, z, n), (0, 0, z, n)
        ma, va = _cell_mean(sample, a, proxy, h)
        mb, vb = _cell_mean(sample, b, proxy, h)
        out.append((ma - mb, float(np.sqrt(va + vb))))
    return out


def _run_one(config, rep):
    """Estimates and SEs (estimator x query) for one replication, plus data statistics."""
    sim = simulate(config.sim, seed=replication_seed(config.sim.seed, rep))
    sample = sim.sample
    h = default_bandwidth(sample.n, config.bandwidth_exp)
    nq = len(config.queries)
    est = np.full((len(config.estimators), nq), np.nan)
    se = np.full_like(est, np.nan)
    reasons = {}
    for k, name in enumerate(config.estimators):
        try:
            if name == "SPE":
                spe = estim.SPE(sample, config.mode, h=h, **config.spe_options)
                fit = spe.fit(nbrs=sim.neighborhoods, correction=config.correction)
                pairs = [(e.estimate, e.std_error)
                         for e in estim.effects(fit, DEFAULT_MODEL, config.queries)]
            elif name in ("Naive1", "Naive2"):
                fit = estim.naive_ols(sample, int(name[-1]), nbrs=sim.neighborhoods)
                pairs = [(e.estimate, e.std_error)
                         for e in estim.effects(fit, DEFAULT_MODEL, config.queries)]
            else:
                pairs = single_proxy_effects(sample, config.queries, h=h)
        except NetmisError as exc:
            reasons[name] = f"{type(exc).__name__}: {exc}"
            continue
        est[k] = [p[0] for p in pairs]
        se[k] = [p[1] for p in pairs]
    return est, se, reasons, _flat_stats(sim.stats)


def _flat_stats(stats):
    out = {}
    for block, vals in stats.items():
        for key, v in vals.items():
            out[f"{block}_{key}"] = float(v)
    return out


@dataclass
class McSummary:
    """Monte Carlo aggregates.

    ``estimates`` and ``std_errors`` have shape (reps, estimators, queries)
    with NaN where a replication was excluded. ``sd`` uses the M-1
    denominator, so ``mse = bias^2 + sd^2 (M-1)/M`` is the mean squared error
    about the truth.
    """

    estimators: tuple
    queries: list
    truth: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    exclusions: list
    data_stats: dict
    bias: np.ndarray = None
    sd: np.ndarray = None
    mse: np.ndarray = None
    coverage: np.ndarray = None
    used: np.ndarray = None

    def __post_init__(self):
        E, Q = len(self.estimators), len(self.queries)
        self.bias = np.full((E, Q), np.nan)
        self.sd = np.full((E, Q), np.nan)
        self.mse = np.full((E, Q), np.nan)
        self.coverage = np.full((E, Q), np.nan)
        self.used = np.zeros(E, dtype=int)
        for k in range(E):
            ok = ~np.isnan(self.estimates[:, k, 0]) if Q else np.zeros(0, bool)
            M = int(ok.sum())
            self.used[k] = M
            if M == 0:
                continue
            err = self.estimates[ok, k] - self.truth
            self.bias[k] = err.mean(axis=0)
            self.sd[k] = err.std(axis=0, ddof=1) if M > 1 else 0.0
            self.mse[k] = self.bias[k] ** 2 + self.sd[k] ** 2 * (M - 1) / M
            self.coverage[k] = np.mean(np.abs(err) <= 1.96 * self.std_errors[ok, k], axis=0)

    @property
    def reps(self):
        return self.estimates.shape[0]

    def row(self, estimator, q):
        k = self.estimators.index(estimator)
        return {"bias": self.bias[k, q], "sd": self.sd[k, q], "mse": self.mse[k, q],
                "coverage": self.coverage[k, q]}

    def table(self):
        lines = []
        for k, name in enumerate(self.estimators):
            for q, (kind, s, z, n) in enumerate(self.queries):
                lines.append(f"{name:<12s}{kind}({s},{z:g},{n})  bias {self.bias[k, q]: .3f}  "
                             f"sd {self.sd[k, q]:.3f}  mse {self.mse[k, q]:.3f}  "
                             f"cr {self.coverage[k, q]:.3f}")
        return "\n".join(lines)


def _workers(reps):
    cap = os.environ.get("NETMIS_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise BadArgs(f"NETMIS_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n, reps))


def run_montecarlo(config, workers=None):
    """Simulate and estimate ``config.reps`` replications; results in replication order.

    Failed estimations are recorded in ``exclusions`` as (rep, estimator,
    reason) and leave NaN rows; they never abort the run.
    """
    config.validate()
    reps = range(config.reps)
    workers = _workers(config.reps) if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, [config] * config.reps, reps, chunksize=4))
    else:
        results = [_run_one(config, r) for r in reps]
    est = np.stack([r[0] for r in results])
    se = np.stack([r[1] for r in results])
    exclusions = [(rep, name, why) for rep, r in enumerate(results) for name, why in r[2].items()]
    for rep, name, why in exclusions:
        log.info("replication %d excluded for %s: %s", rep, name, why)
    keys = results[0][3].keys()
    stats = {k: float(np.mean([r[3][k] for r in results])) for k in keys}
    stats.update({k + "_max": float(np.max([r[3][k] for r in results]))
                  for k in keys if k.endswith("deg_max")})
    summary = McSummary(tuple(config.estimators), list(config.queries), true_effects(config),
                        est, se, exclusions, stats)
    if config.out:
        export_results(summary, config.out)
    return summary


# -- CSV ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Covariate columns of a dataset file.

    ``z_columns`` empty means every column outside the fixed set is a
    covariate. ``z_continuous`` lists the ones smoothed by a kernel.
    """

    z_columns: tuple = ()
    z_continuous: tuple = ()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def export_dataset(sample, path, cluster=None):
    """Write a Sample in the ingestion schema (floats in round-trip precision)."""
    cols = ["y", "d", *sample.z_names, "s1", "deg1", "s2", "deg2"]
    labels = cluster if cluster is not None else sample.cluster
    if labels is not None:
        cols.append(CLUSTER_COLUMN)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(sample.n):
                row = [sample.y[i], sample.d[i], *sample.z[i], sample.s1[i], sample.deg1[i],
                       sample.s2[i], sample.deg2[i]]
                if labels is not None:
                    row.append(labels[i])
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def ingest_csv(path, schema=None):
    """Read a dataset file; returns ``(Sample, DepNeighborhoods or None)``.

    Required columns are y, d, s1, deg1, s2, deg2 and at least one
    covariate. An optional ``cluster_id`` column yields cluster-block
    dependency neighbourhoods.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("file is empty", row=0)
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names", row=1)
    for c in BASE_COLUMNS:
        if c not in header:
            raise SchemaError("missing required column", row=1, column=c)
    zcols = list(schema.z_columns) or [h for h in header
                                      if h not in BASE_COLUMNS and h != CLUSTER_COLUMN]
    if not zcols:
        raise SchemaError("no covariate column", row=1)
    for c in zcols:
        if c not in header:
            raise SchemaError("missing covariate column", row=1, column=c)
    pos = {h: j for j, h in enumerate(header)}
    body = rows[1:]
    if not body:
        raise SchemaError("no data rows", row=1)
    data = {c: np.empty(len(body)) for c in (*BASE_COLUMNS, *zcols)}
    cluster = [] if CLUSTER_COLUMN in pos else None
    for i, r in enumerate(body):
        line = i + 2
        if len(r) != len(header):
            raise SchemaError(f"expected {len(header)} fields, found {len(r)}", row=line)
        for c in data:
            try:
                data[c][i] = float(r[pos[c]])
            except ValueError:
                raise SchemaError(f"not a number: {r[pos[c]]!r}", row=line, column=c) from None
            if not np.isfinite(data[c][i]):
                raise SchemaError("non-finite value", row=line, column=c)
        if cluster is not None:
            cluster.append(r[pos[CLUSTER_COLUMN]].strip())
        if data["d"][i] not in (0.0, 1.0):
            raise IntegrityError("treatment must be 0 or 1", row=line, column="d")
        for s, deg in (("s1", "deg1"), ("s2", "deg2")):
            for c in (s, deg):
                v = data[c][i]
                if v < 0 or v != np.floor(v):
                    raise IntegrityError("counts must be nonnegative integers", row=line, column=c)
            if data[s][i] > data[deg][i]:
                raise IntegrityError(f"{s} exceeds {deg}", row=line, column=s)
    cont = tuple(c in schema.z_continuous for c in zcols)
    sample = Sample(
        y=data["y"], d=data["d"].astype(np.int64), z=np.column_stack([data[c] for c in zcols]),
        s1=data["s1"].astype(np.int64), deg1=data["deg1"].astype(np.int64),
        s2=data["s2"].astype(np.int64), deg2=data["deg2"].astype(np.int64),
        z_continuous=cont, z_names=tuple(zcols),
        cluster=None if cluster is None else np.asarray(cluster),
    )
    nbrs = None if cluster is None else DepNeighborhoods.from_clusters(np.asarray(cluster))
    return sample, nbrs


SUMMARY_COLUMNS = ("estimator", "kind", "s", "z", "n", "truth", "bias", "sd", "mse",
                   "coverage", "reps_used", "reps_excluded")
EFFECT_COLUMNS = ("kind", "s", "z", "n", "estimate", "std_error")
THETA_COLUMNS = ("name", "estimate", "std_error")


def _rows(obj):
    if isinstance(obj, McSummary):
        rows = []
        for k, name in enumerate(obj.estimators):
            for q, (kind, s, z, n) in enumerate(obj.queries):
                rows.append((name, kind, s, z, n, obj.truth[q], obj.bias[k, q], obj.sd[k, q],
                             obj.mse[k, q], obj.coverage[k, q], obj.used[k],
                             obj.reps - obj.used[k]))
        return SUMMARY_COLUMNS, rows
    if isinstance(obj, estim.ThetaFit):
        se = (np.sqrt(np.clip(np.diag(obj.cov), 0.0, None)) if obj.cov is not None
              else np.full(len(obj.theta_hat), np.nan))
        names = obj.names or tuple(f"theta{k}" for k in range(len(obj.theta_hat)))
        return THETA_COLUMNS, list(zip(names, obj.theta_hat, se))
    obj = list(obj)
    if all(isinstance(e, estim.EffectEstimate) for e in obj):
        return EFFECT_COLUMNS, [(e.kind, e.s, e.z, e.n, e.estimate, e.std_error) for e in obj]
    raise BadArgs(f"cannot export {type(obj).__name__}")


def export_results(obj, path):
    """CSV of a McSummary, ThetaFit or list of EffectEstimate; byte-stable across reruns."""
    cols, rows = _rows(obj)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def export_raw(summary, path):
    """Per-replication estimates and standard errors, one row per (rep, estimator, effect)."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("rep", "estimator", "kind", "s", "z", "n", "estimate", "std_error"))
            for rep in range(summary.reps):
                for k, name in enumerate(summary.estimators):
                    for q, (kind, s, z, n) in enumerate(summary.queries):
                        w.writerow([_fmt(v) for v in (rep, name, kind, s, z, n,
                                                      summary.estimates[rep, k, q],
                                                      summary.std_errors[rep, k, q])])
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def with_overrides(config, **kw):
    """Copy of an ExperimentConfig with dataclass fields replaced."""
    names = {f.name for f in fields(ExperimentConfig)}
    bad = set(kw) - names
    if bad:
        raise BadArgs(f"unknown experiment field(s) {sorted(bad)}")
    return replace(config, **kw).validate()
