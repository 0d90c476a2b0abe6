"""Scaling experiments, log-log exponent fits and reference exponents.

Reference values:

* Watabiki's dimension d_H(gamma) = 1 + gamma^2/4 + sqrt((1 + gamma^2/4)^2 + gamma^2);
* the graph-distance exponent chi = 2/d_H;
* the sub-linearity template c* gamma^(4/3) / log(1/gamma), with c* a free parameter.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import seeding
from .dgff import MAX_INTERIOR, DgffSpec, sample_dgff_band_sum, sample_dgff_exact
from .errors import ConfigError, DomainError, UnreachableError
from .fpp import WeightedLattice, fpp_distance
from .lqg import build_measure, graph_distance, lqg_field

log = logging.getLogger(__name__)

DEFAULT_SEED = 20240607
Z95 = 1.959963984540054


def watabiki_dimension(gamma: float) -> float:
    if gamma < 0:
        raise DomainError("gamma must be >= 0")
    a = 1.0 + gamma * gamma / 4.0
    return a + math.sqrt(a * a + gamma * gamma)


def lgd_exponent_prediction(gamma: float) -> float:
    return 2.0 / watabiki_dimension(gamma)


def paper_bound_exponent(gamma: float, c_star: float) -> float:
    """c* gamma^(4/3) / log(1/gamma) for 0 < gamma < 1."""
    if not 0 < gamma < 1:
        raise DomainError("need 0 < gamma < 1 (log(1/gamma) must be positive)")
    if not c_star > 0:
        raise DomainError("need c_star > 0")
    return c_star * gamma ** (4.0 / 3.0) / math.log(1.0 / gamma)


# ---------------------------------------------------------------------------
# series and fits

@dataclass(frozen=True, eq=False)
class ScalingSeries:
    scales: np.ndarray
    stats: np.ndarray
    stderrs: np.ndarray
    replicas: np.ndarray
    medians: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=float)
        cols = [s, np.asarray(self.stats, dtype=float), np.asarray(self.stderrs, dtype=float),
                np.asarray(self.replicas, dtype=np.int64)]
        if len({c.size for c in cols}) != 1:
            raise DomainError("series columns differ in length")
        d = np.diff(s)
        if s.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise DomainError("scales must be strictly monotone")
        if np.any(cols[2] < 0):
            raise DomainError("stderr must be >= 0")
        object.__setattr__(self, "scales", cols[0])
        object.__setattr__(self, "stats", cols[1])
        object.__setattr__(self, "stderrs", cols[2])
        object.__setattr__(self, "replicas", cols[3])
        if self.medians is not None:
            object.__setattr__(self, "medians", np.asarray(self.medians, dtype=float))

    def __len__(self):
        return int(self.scales.size)

    def rows(self):
        return list(zip(self.scales.tolist(), self.stats.tolist(), self.stderrs.tolist(), self.replicas.tolist()))


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    slope_ci95: tuple[float, float]
    r2: float
    slope_se: float = 0.0


def fit_exponent(series: ScalingSeries) -> ExponentFit:
    """OLS of log(stat) on log(scale).

    The slope standard error combines, in quadrature, the delta-method
    propagation of the per-row standard errors (Var log X ~ (se/X)^2) and the
    usual residual-variance term.
    """
    if len(series) < 3:
        raise DomainError("need at least 3 rows to fit")
    if np.any(series.stats <= 0) or np.any(series.scales <= 0):
        raise DomainError("statistics and scales must be positive")
    x = np.log(series.scales)
    y = np.log(series.stats)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    res = y - (intercept + slope * x)
    rss = float(res @ res)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if tss == 0 else min(1.0, max(0.0, 1.0 - rss / tss))
    wts = xc / sxx
    var_delta = float(((wts * series.stderrs / series.stats) ** 2).sum())
    var_res = rss / (len(x) - 2) / sxx
    se = math.sqrt(var_delta + var_res)
    return ExponentFit(slope, intercept, (slope - Z95 * se, slope + Z95 * se), r2, se)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class WatabikiReport:
    gamma: float
    d_H: float
    chi: float
    c_star: float
    paper_bound: float | None
    paper_slope_template: float | None
    quadratic_slope_template: float
    measured: ExponentFit | None

    def to_dict(self) -> dict:
        return asdict(self)


def compare_report(fit: ExponentFit | None, gamma: float, c_star: float = 1.0) -> WatabikiReport:
    """Measured slope next to Watabiki's prediction and the two sub-linearity templates."""
    d = watabiki_dimension(gamma)
    if gamma == 0:
        bound = 0.0
    elif 0 < gamma < 1:
        bound = paper_bound_exponent(gamma, c_star)
    else:
        bound = None
    return WatabikiReport(float(gamma), d, 2.0 / d, float(c_star), bound,
                          None if bound is None else 1.0 - bound, 1.0 - c_star * gamma * gamma, fit)


# ---------------------------------------------------------------------------
# experiments

def _check_replicas(replicas) -> int:
    r = int(replicas)
    if r < 1:
        raise ConfigError(f"replicas must be >= 1, got {replicas}")
    return r


@dataclass(frozen=True)
class FppExperiment:
    gamma: float
    ns: tuple[int, ...]
    replicas: int
    seed: int = DEFAULT_SEED
    margin: float = 0.25
    sampler: str = "auto"
    threads: int = 1

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        ns = tuple(int(n) for n in self.ns)
        if not ns or any(n < 2 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("ns must be a strictly increasing list of exponents >= 2 (N = 2^n)")
        if self.sampler not in ("auto", "exact", "band"):
            raise ConfigError("sampler must be 'auto', 'exact' or 'band'")
        if not 0 < self.margin < 0.5:
            raise ConfigError("margin must lie in (0, 1/2)")
        object.__setattr__(self, "ns", ns)
        object.__setattr__(self, "replicas", _check_replicas(self.replicas))
        object.__setattr__(self, "seed", seeding.check_seed(self.seed))
        object.__setattr__(self, "threads", max(1, int(self.threads)))


def _dgff_sample(spec: DgffSpec, sampler: str, seed: int, r: int):
    if sampler == "exact" or (sampler == "auto" and spec.interior_count <= MAX_INTERIOR):
        return sample_dgff_exact(spec, seed, r)
    return sample_dgff_band_sum(spec, seed, r)


def fpp_replica(cfg: FppExperiment, n: int, r: int) -> float:
    spec = DgffSpec(n, cfg.margin)
    f = _dgff_sample(spec, cfg.sampler, cfg.seed, r)
    lat = WeightedLattice.from_field(f, cfg.gamma)
    v, w = spec.endpoints()
    return fpp_distance(lat, v, w).distance


def _aggregate(values: np.ndarray) -> tuple[float, float, float]:
    m = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return m, se, float(np.median(values))


def run_fpp_experiment(cfg: FppExperiment) -> ScalingSeries:
    """Mean FPP distance across the inner box V_{N,eps} for each N = 2^n."""
    jobs = [(n, r) for n in cfg.ns for r in range(cfg.replicas)]
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            out = list(ex.map(lambda job: fpp_replica(cfg, *job), jobs))
    else:
        out = [fpp_replica(cfg, n, r) for n, r in jobs]
    vals = np.array(out).reshape(len(cfg.ns), cfg.replicas)
    rows = [_aggregate(v) for v in vals]
    flags = ["replicas=1: stderr set to 0"] if cfg.replicas == 1 else []
    return ScalingSeries(np.array([2 ** n for n in cfg.ns], dtype=float), [a for a, _, _ in rows],
                         [b for _, b, _ in rows], [cfg.replicas] * len(rows), [c for _, _, c in rows], flags)


@dataclass(frozen=True)
class LgdExperiment:
    gamma: float
    n: int
    deltas: tuple[float, ...]
    replicas: int
    seed: int = DEFAULT_SEED
    v: tuple[float, float] = (0.25, 0.5)
    w: tuple[float, float] = (0.75, 0.5)
    kmax: int | None = None
    threads: int = 1

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        n = int(self.n)
        if n < 3:
            raise ConfigError("n must be >= 3")
        ds = tuple(float(d) for d in self.deltas)
        floor = 2.0 ** (-n + 2)
        if len(ds) < 1 or any(not (floor <= d < 1) for d in ds):
            raise ConfigError(f"every delta must lie in [2^-(n-2), 1) = [{floor}, 1)")
        if len(ds) > 1:
            diff = np.diff(ds)
            if not (np.all(diff > 0) or np.all(diff < 0)):
                raise ConfigError("deltas must be strictly monotone")
        v, w = tuple(map(float, self.v)), tuple(map(float, self.w))
        for p in (v, w):
            if not all(0 <= c <= 1 for c in p):
                raise ConfigError(f"endpoint {p} outside the unit square")
        if v == w:
            raise ConfigError("endpoints v and w must differ")
        if self.kmax is not None and not 1 <= int(self.kmax) <= n:
            raise ConfigError(f"kmax must lie in [1, n={n}]")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "deltas", ds)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "replicas", _check_replicas(self.replicas))
        object.__setattr__(self, "seed", seeding.check_seed(self.seed))
        object.__setattr__(self, "threads", max(1, int(self.threads)))


def lgd_replica(cfg: LgdExperiment, r: int) -> list[float]:
    """Graph distances for every delta on replica r; NaN where no chain exists."""
    f = lqg_field(cfg.n, seeding.replica_seed(cfg.seed, r))
    g = build_measure(f, cfg.gamma, cfg.n)
    out = []
    for d in cfg.deltas:
        try:
            out.append(float(graph_distance(g, d, cfg.v, cfg.w, cfg.kmax)))
        except UnreachableError:
            out.append(math.nan)
    return out


def run_lgd_experiment(cfg: LgdExperiment) -> ScalingSeries:
    """Mean dyadic-ball graph distance for each delta; rows with any unreachable replica are dropped."""
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            out = list(ex.map(lambda r: lgd_replica(cfg, r), range(cfg.replicas)))
    else:
        out = [lgd_replica(cfg, r) for r in range(cfg.replicas)]
    vals = np.array(out, dtype=float).reshape(cfg.replicas, len(cfg.deltas))
    scales, rows, flags = [], [], []
    for j, d in enumerate(cfg.deltas):
        col = vals[:, j]
        bad = int(np.isnan(col).sum())
        if bad:
            log.warning("delta=%g: %d of %d replicas unreachable; row omitted", d, bad, cfg.replicas)
            flags.append(f"delta={d!r} omitted ({bad} unreachable)")
            continue
        scales.append(d)
        rows.append(_aggregate(col))
    if cfg.replicas == 1:
        flags.append("replicas=1: stderr set to 0")
    return ScalingSeries(scales, [a for a, _, _ in rows], [b for _, b, _ in rows],
                         [cfg.replicas] * len(rows), [c for _, _, c in rows], flags)


# ---------------------------------------------------------------------------
# output

def series_to_csv(series: ScalingSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scale", "stat", "stderr", "replicas"])
        for s, m, e, r in series.rows():
            wr.writerow([repr(s), repr(m), repr(e), r])


def series_summary(series: ScalingSeries, fit: ExponentFit | None = None) -> dict:
    out = {"rows": [dict(zip(("scale", "stat", "stderr", "replicas"), row)) for row in series.rows()],
           "medians": None if series.medians is None else series.medians.tolist(),
           "flags": list(series.flags)}
    if fit is not None:
        out["fit"] = asdict(fit)
    return out


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
