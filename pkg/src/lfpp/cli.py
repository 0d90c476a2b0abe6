"""Command-line entry point: ``lfpp <subcommand> [options]``.

Options may also come from a JSON config (``--config``) holding
``schema_version`` and the option names in snake case.  Precedence is
command-line flag > ``LFPP_SEED`` (seed only) > config file > built-in default.

Exit codes: 0 success, 2 configuration/domain error, 3 capacity error,
4 numeric or structural failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import crossing, dgff, exponents, fields, fpp, lqg
from .errors import (CapacityError, ConfigError, DepthError, DomainError, LfppError, NumericError,
                     ResolutionError, StructuralError, UnreachableError)

SCHEMA_VERSION = 1
log = logging.getLogger("lfpp")

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_NUMERIC = 0, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DomainError, ResolutionError)):
        return EXIT_CONFIG
    if isinstance(exc, CapacityError):
        return EXIT_CAPACITY
    if isinstance(exc, (NumericError, UnreachableError, StructuralError, DepthError)):
        return EXIT_NUMERIC
    return EXIT_NUMERIC


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _power_of_two(N: int) -> int:
    if N < 4 or N & (N - 1):
        raise ConfigError(f"--n must be a power of two >= 4, got {N}")
    return int(round(math.log2(N)))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


# ---------------------------------------------------------------------------
# subcommands

def cmd_sample_field(a) -> int:
    if a.dgff:
        n = _power_of_two(a.n)
        spec = dgff.DgffSpec(n)
        f = dgff.sample_dgff_exact(spec, a.seed) if a.sampler == "exact" else \
            dgff.sample_dgff_band_sum(spec, a.seed) if a.sampler == "band" else \
            (dgff.sample_dgff_exact(spec, a.seed) if spec.interior_count <= dgff.MAX_INTERIOR
             else dgff.sample_dgff_band_sum(spec, a.seed))
    else:
        _require(a.delta is not None, "--delta is required for --eta")
        _require(0 < a.delta <= a.delta_prime <= 1, "need 0 < delta <= delta' <= 1")
        mesh = a.mesh if a.mesh is not None else a.delta / 2
        _require(mesh > 0, "--mesh must be positive")
        _require(a.extent > 0, "--extent must be positive")
        side = int(math.floor(a.extent / mesh + 1e-9)) + 1
        f = fields.sample_eta(fields.GridSpec(side, side, mesh), a.delta, a.delta_prime, a.seed)
    if a.out:
        fields.write_field(a.out, f)
    v = f.values
    _emit({"shape": list(v.shape), "mesh": f.grid.mesh, "band": list(f.band), "seed": f.seed,
           "mean": float(v.mean()), "var": float(v.var()), "out": a.out})
    return EXIT_OK


def cmd_fpp(a) -> int:
    _require(a.gamma >= 0, f"--gamma must be >= 0, got {a.gamma}")
    n = _power_of_two(a.n)
    spec = dgff.DgffSpec(n, a.margin)
    f = exponents._dgff_sample(spec, a.sampler, a.seed, a.replica)
    lat = fpp.WeightedLattice.from_field(f, a.gamma)
    v, w = spec.endpoints()
    res = fpp.fpp_distance(lat, v, w)
    hops = fpp.bfs_oracle(lat, v, w)
    out = {"N": a.n, "gamma": a.gamma, "seed": a.seed, "v": list(v), "w": list(w),
           "distance": res.distance, "path_vertices": len(res.path), "bfs_hops": hops}
    if a.gamma == 0:
        out["matches_bfs"] = res.distance == hops + 1
    if a.out:
        with open(a.out, "w") as fh:
            fh.write("i,j\n")
            for i, j in res.path.vertices:
                fh.write(f"{i},{j}\n")
    _emit(out)
    return EXIT_OK


def _calibration(a) -> crossing.Calibration:
    d = crossing.DEFAULT_CALIBRATION
    return crossing.Calibration(a.calib_c if a.calib_c is not None else d.c,
                                a.calib_C if a.calib_C is not None else d.C,
                                a.calib_C_prime if a.calib_C_prime is not None else d.C_prime)


def cmd_crossing(a) -> int:
    params = crossing.derive_params(a.gamma, _calibration(a))
    layout = crossing.build_layout(params)
    src, poly = crossing.replica_crossing(a.gamma, a.n, a.seed, a.replica, params, layout)
    f = src.total()
    ledger = crossing.crossing_weight(f, poly, a.gamma)
    report = {"gamma": a.gamma, "n": a.n, "seed": a.seed, "replica": a.replica,
              "feasible": params.feasible, "N_gamma": params.N_gamma, "Gamma": params.Gamma,
              "beta": params.beta, "segments": int(len(poly.segments)),
              "crossing": crossing.is_crossing(poly), "ledger": ledger.to_dict(),
              "join_failures": layout.join_failures}
    if not params.feasible:
        log.warning("calibrated switch-block size infeasible; using N_gamma = %d", params.N_gamma)
    if a.dominance:
        dom = crossing.dominance_check(f, poly, a.gamma, ledger)
        report["dominance"] = {"lattice_distance": dom.lattice_distance, "allowance": dom.allowance,
                               "passed": dom.passed}
    if a.out_csv:
        crossing.polypath_to_csv(a.out_csv, poly)
    if a.out_json:
        crossing.ledger_to_json(a.out_json, ledger, {k: v for k, v in report.items() if k != "ledger"})
    _emit(report)
    return EXIT_OK


def cmd_measure_lambda(a) -> int:
    _require(a.replicas >= 1, "--replicas must be >= 1")
    params = crossing.derive_params(a.gamma, _calibration(a))
    est = crossing.measure_lambda(a.gamma, a.n, a.replicas, a.seed, params)
    out = {"gamma": a.gamma, "n": a.n, "replicas": est.replicas, "mean": est.mean, "stderr": est.stderr,
           "bound": crossing.lambda_bound(a.n, a.gamma, params.calib.c), "feasible": params.feasible}
    if a.out:
        exponents.write_json(out, a.out)
    _emit(out)
    return EXIT_OK


def cmd_lqg_cover(a) -> int:
    _require(a.gamma >= 0, "--gamma must be >= 0")
    f = lqg.lqg_field(a.n, a.seed)
    g = lqg.build_measure(f, a.gamma, a.n)
    seg = ((a.segment[0], a.segment[1]), (a.segment[2], a.segment[3]))
    cover = lqg.cover_segment(g, a.delta, seg)
    if a.out:
        lqg.cover_to_json(cover, a.out)
    _emit({"gamma": a.gamma, "n": a.n, "delta": a.delta, "count": cover.count,
           "certified": cover.certified, "uncovered": len(cover.uncovered), "out": a.out})
    return EXIT_OK


def cmd_lgd(a) -> int:
    cfg = exponents.LgdExperiment(a.gamma, a.n, tuple(a.deltas), a.replicas, a.seed,
                                  tuple(a.v), tuple(a.w), a.kmax, a.threads)
    series = exponents.run_lgd_experiment(cfg)
    fit = exponents.fit_exponent(series) if len(series) >= 3 else None
    if a.out:
        exponents.series_to_csv(series, a.out)
    summary = exponents.series_summary(series, fit)
    if a.report:
        exponents.write_json(summary, a.report)
    _emit(summary)
    return EXIT_OK


def cmd_exponent(a) -> int:
    cfg = exponents.FppExperiment(a.gamma, tuple(a.ns), a.replicas, a.seed, a.margin, a.sampler, a.threads)
    series = exponents.run_fpp_experiment(cfg)
    fit = exponents.fit_exponent(series) if len(series) >= 3 else None
    report = exponents.compare_report(fit, a.gamma, a.c_star)
    summary = exponents.series_summary(series, fit)
    summary["report"] = report.to_dict()
    if a.out:
        exponents.series_to_csv(series, a.out)
    if a.report:
        exponents.write_json(summary, a.report)
    _emit(summary)
    return EXIT_OK


def cmd_watabiki(a) -> int:
    _require(a.gamma >= 0, "--gamma must be >= 0")
    rep = exponents.compare_report(None, a.gamma, a.c_star)
    print(f"d_H = {rep.d_H:.6f}")
    print(f"chi = {rep.chi:.6f}")
    if rep.paper_bound is not None:
        print(f"c*gamma^(4/3)/log(1/gamma) = {rep.paper_bound:.6f}  (c* = {rep.c_star:g})")
    return EXIT_OK


def cmd_selftest(a) -> int:
    checks = {}
    checks["watabiki"] = abs(exponents.watabiki_dimension(math.sqrt(8 / 3)) - 4) < 1e-12
    rng = np.random.default_rng(a.seed)
    ok = True
    for _ in range(20):
        lat = fpp.WeightedLattice.from_values(rng.standard_normal((3, 3)), 0.5)
        ok &= fpp.fpp_distance(lat, (0, 0), (2, 2)).distance == fpp.exhaustive_oracle(lat, (0, 0), (2, 2))
    checks["fpp_oracle"] = bool(ok)
    checks["dgff_factor"] = dgff.green_factor(dgff.DgffSpec(4)).residual < 1e-9
    f = lqg.lqg_field(6, a.seed)
    g = lqg.build_measure(f, 0.0, 6)
    checks["lqg_lebesgue"] = g.total == 1.0 and g.quadtree_defect() <= 1e-12
    fs = fields.sample_eta(fields.GridSpec(9, 9, 0.125), 0.25, 1.0, a.seed)
    checks["field_roundtrip"] = bool(np.array_equal(fields.loads_field(fields.dumps_field(fs)).values, fs.values))
    _emit(checks)
    return EXIT_OK if all(checks.values()) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser

def _add_seed(p) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (LFPP_SEED overrides the config value)")


def _add_calibration(p) -> None:
    p.add_argument("--calib-c", type=float, default=None)
    p.add_argument("--calib-C", type=float, default=None)
    p.add_argument("--calib-C-prime", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lfpp", description="Liouville first-passage percolation experiments")
    ap.add_argument("--config", help="JSON config file with schema_version")
    ap.add_argument("--threads", type=int, default=None, help="worker thread cap")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-field", help="sample an eta or DGFF field and write it in LFPP format")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--eta", action="store_true", default=True)
    kind.add_argument("--dgff", action="store_true")
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-prime", type=float, default=1.0)
    p.add_argument("--mesh", type=float)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--n", type=int, default=32, help="DGFF box side N")
    p.add_argument("--sampler", choices=("auto", "exact", "band"), default="auto")
    p.add_argument("--out")
    _add_seed(p)
    p.set_defaults(func=cmd_sample_field)

    p = sub.add_parser("fpp", help="FPP distance across the inner box of a DGFF sample")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--n", type=int, default=None, help="box side N (power of two)")
    p.add_argument("--margin", type=float, default=0.25)
    p.add_argument("--sampler", choices=("auto", "exact", "band"), default="auto")
    p.add_argument("--replica", type=int, default=0)
    p.add_argument("--out", help="CSV of geodesic vertices")
    _add_seed(p)
    p.set_defaults(func=cmd_fpp)

    p = sub.add_parser("crossing", help="build one recursive crossing and its weight ledger")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--n", type=int, default=None, help="scale exponent")
    p.add_argument("--replica", type=int, default=0)
    p.add_argument("--dominance", action="store_true", help="also run the lattice dominance check")
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    _add_calibration(p)
    _add_seed(p)
    p.set_defaults(func=cmd_crossing)

    p = sub.add_parser("measure-lambda", help="Monte Carlo mean crossing weight")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--replicas", type=int, default=100)
    p.add_argument("--out")
    _add_calibration(p)
    _add_seed(p)
    p.set_defaults(func=cmd_measure_lambda)

    p = sub.add_parser("lqg-cover", help="dyadic (M, delta)-ball cover of a segment")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--n", type=int, default=8, help="cell level (mesh 2^-n)")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--segment", type=float, nargs=4, default=[0.25, 0.5, 0.75, 0.5],
                   metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--out")
    _add_seed(p)
    p.set_defaults(func=cmd_lqg_cover)

    p = sub.add_parser("lgd", help="dyadic Liouville graph distance series over delta")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--deltas", type=_float_list, default=None, help="comma separated")
    p.add_argument("--replicas", type=int, default=10)
    p.add_argument("--v", type=float, nargs=2, default=[0.25, 0.5])
    p.add_argument("--w", type=float, nargs=2, default=[0.75, 0.5])
    p.add_argument("--kmax", type=int, default=None)
    p.add_argument("--out", help="series CSV")
    p.add_argument("--report", help="JSON summary")
    _add_seed(p)
    p.set_defaults(func=cmd_lgd)

    p = sub.add_parser("exponent", help="FPP scaling series, exponent fit and comparison report")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--ns", type=_int_list, default=None, help="comma separated exponents, N = 2^n")
    p.add_argument("--replicas", type=int, default=20)
    p.add_argument("--margin", type=float, default=0.25)
    p.add_argument("--sampler", choices=("auto", "exact", "band"), default="auto")
    p.add_argument("--c-star", type=float, default=1.0)
    p.add_argument("--out", help="series CSV")
    p.add_argument("--report", help="JSON summary")
    _add_seed(p)
    p.set_defaults(func=cmd_exponent)

    p = sub.add_parser("watabiki", help="print d_H(gamma) and chi = 2/d_H")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--c-star", type=float, default=1.0)
    p.set_defaults(func=cmd_watabiki)

    p = sub.add_parser("selftest", help="quick internal consistency checks")
    _add_seed(p)
    p.set_defaults(func=cmd_selftest)
    return ap


_REQUIRED = {
    "fpp": ("gamma", "n"), "crossing": ("gamma", "n"), "measure-lambda": ("gamma", "n"),
    "lqg-cover": ("gamma", "delta"), "lgd": ("gamma", "deltas"), "exponent": ("gamma", "ns"),
    "watabiki": ("gamma",),
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    return cfg


def resolve(args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Merge config-file values and LFPP_SEED under the explicit flags."""
    given = {tok[2:].split("=")[0].replace("-", "_") for tok in argv if tok.startswith("--")}
    cfg = load_config(args.config) if args.config else {}
    for key, val in cfg.items():
        if key in ("schema_version", "command"):
            continue
        if not hasattr(args, key):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if key not in given:
            setattr(args, key, val)
    if hasattr(args, "seed") and "seed" not in given:
        env = os.environ.get("LFPP_SEED")
        if env is not None:
            try:
                args.seed = int(env)
            except ValueError as exc:
                raise ConfigError(f"LFPP_SEED must be an integer, got {env!r}") from exc
    if hasattr(args, "seed") and args.seed is None:
        args.seed = exponents.DEFAULT_SEED
    if hasattr(args, "seed") and not 0 <= int(args.seed) < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    for key in _REQUIRED.get(args.command, ()):
        if getattr(args, key, None) is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required for {args.command}")
    args.threads = max(1, int(args.threads)) if args.threads else 1
    return args


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        args = resolve(args, argv)
        code = args.func(args)
    except LfppError as exc:
        print(f"lfpp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
