"""Command-line front end.

Commands: gen-trace, run, sweep, offline, round-check, report. Every
command that takes a configuration reads an optional JSON file first and
then applies flags on top of it, key for key.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import oma, rounding, sim
from .catalog import Catalog, CostModel, METRICS, load_catalog, save_csv, save_fvecs
from .policies import (INDEX, NATIVE, POLICIES, AcaiPolicy, ClsLruPolicy, LruPolicy, QCachePolicy,
                       RankCache, RndLruPolicy, SimLruPolicy, StaticPolicy)

log = logging.getLogger("simcache")

EXIT_OK, EXIT_USAGE, EXIT_PROPERTY, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class PropertyFailure(RuntimeError):
    pass


# Recognised configuration keys with their types and defaults.
CONFIG_KEYS = {
    "kind": (str, "grid"),          # grid | rank | file
    "side": (int, 30),
    "scale": (float, 6.0),
    "beta": (float, 1.0),
    "catalog": (str, None),
    "catalog_format": (str, None),
    "metric": (str, None),
    "trace": (str, None),
    "T": (int, 10_000),
    "k": (int, 1),
    "h": (int, 15),
    "cf": (float, 1.0),
    "policy": (str, "acai"),
    "kprime": (int, None),
    "ctheta": (str, None),
    "l": (int, None),
    "history_cap": (int, 32),
    "serving": (str, NATIVE),
    "mirror": (str, oma.NEGENTROPY),
    "schedule": (str, "cosine"),
    "eta": (float, None),
    "rounding": (str, rounding.DEPROUND),
    "M": (int, 1),
    "delta": (float, 0.05),
    "iterations": (int, None),
    "seed": (int, 0),
    "out": (str, None),
    "summary": (str, None),
    "window": (int, 1),
}

# seed stream index per component
STREAMS = {"trace": 0, "policy": 1, "rounding": 2, "offline": 3}


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic child stream of the single run seed."""
    child = np.random.SeedSequence(seed).spawn(len(STREAMS))[STREAMS[name]]
    return np.random.default_rng(child)


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def validate_config(raw: dict) -> dict:
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (typ, default) in CONFIG_KEYS.items():
        val = raw.get(key, default)
        if val is not None:
            if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
                if isinstance(val, float) and val.is_integer():
                    val = int(val)
                else:
                    raise ConfigError(f"config key {key!r} must be an integer, got {val!r}")
            elif typ is float:
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"config key {key!r} must be a number, got {val!r}")
                val = float(val)
            elif typ is str:
                val = str(val)
        cfg[key] = val
    if cfg["kind"] not in ("grid", "rank", "file"):
        raise ConfigError(f"unknown trace kind {cfg['kind']!r}; expected grid, rank or file")
    if cfg["policy"] not in POLICIES:
        raise ConfigError(f"unknown policy {cfg['policy']!r}; valid names: {', '.join(POLICIES)}")
    if cfg["T"] < 1:
        raise ConfigError("T must be >= 1")
    if cfg["serving"] not in (NATIVE, INDEX):
        raise ConfigError(f"serving must be {NATIVE!r} or {INDEX!r}")
    if cfg["schedule"] not in ("constant", "theorem", "cosine"):
        raise ConfigError(f"unknown schedule {cfg['schedule']!r}")
    if cfg["schedule"] == "constant" and cfg["eta"] is None:
        raise ConfigError("a constant schedule needs eta")
    if cfg["metric"] is not None and cfg["metric"] not in METRICS:
        raise ConfigError(f"unknown metric {cfg['metric']!r}; expected one of {METRICS}")
    if cfg["window"] < 1:
        raise ConfigError("window must be >= 1")
    try:
        oma.canonical_map(cfg["mirror"])
        rounding.RoundingConfig(cfg["rounding"], cfg["M"], cfg["delta"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def merged_config(args, keys) -> dict:
    raw = load_config(getattr(args, "config", None))
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    return validate_config(raw)


def parse_ctheta(text, cf: float) -> float:
    """Threshold as a number or as a multiple of c_f, e.g. ``1.5cf``."""
    if text is None:
        return 1.5 * cf
    s = str(text).strip().lower()
    try:
        if s.endswith("cf"):
            mult = s[:-2].strip() or "1"
            return float(mult) * cf
        return float(s)
    except ValueError:
        raise ConfigError(f"cannot parse threshold {text!r}") from None


# --- building experiments from a config -------------------------------------------

def build_workload(cfg: dict):
    """Catalog and trace described by the config."""
    kind = cfg["kind"]
    rng = component_rng(cfg["seed"], "trace")
    if kind == "grid":
        cat, trace = sim.gen_grid_trace(cfg["side"], cfg["T"], rng, cfg["scale"])
        return cat, trace
    if cfg["catalog"] is None:
        raise ConfigError(f"trace kind {kind!r} needs a catalog file")
    cat = load_catalog(cfg["catalog"], cfg["metric"] or "sqeuclidean", cfg["catalog_format"])
    if kind == "rank":
        return cat, sim.gen_rank_trace(cat, cfg["beta"], cfg["T"], rng)
    if cfg["trace"] is None:
        raise ConfigError("trace kind 'file' needs a trace path")
    trace = sim.load_trace(cfg["trace"], cat)
    if len(trace) > cfg["T"]:
        trace = trace.head(cfg["T"])
    return cat, trace


def build_cost(cfg: dict, catalog: Catalog) -> CostModel:
    cost = CostModel(k=cfg["k"], h=cfg["h"], cf=cfg["cf"], metric=catalog.metric)
    cost.check(catalog)
    return cost


def build_schedule(cfg: dict, catalog: Catalog, cost: CostModel, trace, T: int) -> oma.Schedule:
    kind = cfg["schedule"]
    if kind == "constant":
        return oma.Schedule("constant", eta=cfg["eta"])
    if kind == "cosine":
        return oma.Schedule("cosine", T=T, cf=cost.cf)
    cdk = oma.estimate_cdk((r.vector for r in trace), catalog, cost.k)
    return oma.Schedule("theorem", T=T, cf=cost.cf, cdk=cdk, n=catalog.n, h=cost.h)


def build_policy(cfg: dict, catalog: Catalog, cost: CostModel, trace):
    name = cfg["policy"]
    ranks = RankCache(catalog, cost)
    serving = cfg["serving"]
    if name == "acai":
        sched = build_schedule(cfg, catalog, cost, trace, len(trace))
        rc = rounding.RoundingConfig(cfg["rounding"], cfg["M"], cfg["delta"])
        return AcaiPolicy(catalog, cost, cfg["mirror"], sched, rc, component_rng(cfg["seed"], "rounding"), ranks)
    if name == "lru":
        return LruPolicy(catalog, cost, serving, ranks)
    if name == "static":
        x = np.zeros(catalog.n)
        return StaticPolicy(catalog, cost, x, ranks)
    ctheta = parse_ctheta(cfg["ctheta"], cost.cf)
    kprime = cfg["kprime"]
    if name == "sim-lru":
        return SimLruPolicy(catalog, cost, kprime, ctheta, serving, ranks)
    if name == "rnd-lru":
        return RndLruPolicy(catalog, cost, kprime, ctheta, component_rng(cfg["seed"], "policy"), serving, ranks)
    if name == "cls-lru":
        return ClsLruPolicy(catalog, cost, kprime, ctheta, cfg["history_cap"], serving, ranks)
    return QCachePolicy(catalog, cost, cfg["l"], serving, ranks)


def run_config(cfg: dict) -> dict:
    """Execute one simulation and write its outputs; returns the JSON summary."""
    cat, trace = build_workload(cfg)
    cost = build_cost(cfg, cat)
    policy = build_policy(cfg, cat, cost, trace)
    series = sim.run(policy, trace, cost, config=cfg)
    if cfg["out"]:
        series.write_csv(cfg["out"], cfg["window"])
    if cfg["summary"]:
        series.write_json(cfg["summary"])
    return series.summary()


# --- commands ----------------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    if args.T < 1:
        raise ConfigError("--T must be >= 1")
    rng = component_rng(args.seed, "trace")
    if args.kind == "grid":
        cat, trace = sim.gen_grid_trace(args.side, args.T, rng, args.scale)
    else:
        if args.catalog is None:
            raise ConfigError("--kind rank needs --catalog")
        cat = load_catalog(args.catalog, args.metric or "sqeuclidean", args.catalog_format)
        trace = sim.gen_rank_trace(cat, args.beta, args.T, rng)
    if args.out_catalog:
        if args.out_catalog.endswith(".fvecs"):
            save_fvecs(args.out_catalog, cat.points)
        else:
            save_csv(args.out_catalog, cat.points)
    sim.save_trace(args.out_trace, trace)
    distinct = np.unique(trace.ids).size
    line = f"N={cat.n} T={len(trace)} distinct={distinct}"
    if args.kind == "rank":
        line += f" tail_exponent={sim.zipf_tail_exponent(trace):.3f}"
    print(line)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = merged_config(args, CONFIG_KEYS)
    summary = run_config(cfg)
    print(f"policy={cfg['policy']} T={summary['T']} nag={summary['nag']:.6f} "
          f"steady_nag={summary['steady_nag']:.6f} update_cost={summary['update_cost']}")
    return EXIT_OK


def _parse_axis(text: str):
    if "=" not in text:
        raise ConfigError(f"sweep axis {text!r} must look like key=v1,v2")
    key, vals = text.split("=", 1)
    key = key.strip()
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown sweep key {key!r}")
    typ = CONFIG_KEYS[key][0]
    out = []
    for v in vals.split(","):
        v = v.strip()
        out.append(typ(float(v)) if typ is int else typ(v))
    return key, out


def _sweep_job(cfg):
    return run_config(validate_config(cfg))


def default_jobs() -> int:
    env = os.environ.get("SIMCACHE_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SIMCACHE_JOBS must be an integer, got {env!r}") from None
    return 1


def cmd_sweep(args) -> int:
    base = merged_config(args, [k for k in CONFIG_KEYS if k not in ("out", "summary")])
    axes = [_parse_axis(a) for a in args.axis]
    seeds = args.seeds if args.seeds else [base["seed"]]
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cells = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        for seed in seeds:
            cfg = dict(base)
            cfg.update({key: v for (key, _), v in zip(axes, combo)})
            cfg["seed"] = seed
            tag = "_".join(f"{key}{v}" for (key, _), v in zip(axes, combo)) or "base"
            cfg["summary"] = str(outdir / f"{tag}_seed{seed}.json")
            cfg["out"] = str(outdir / f"{tag}_seed{seed}.csv") if args.series else None
            cells.append(cfg)
    jobs = args.jobs if args.jobs is not None else default_jobs()
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, cells))
    else:
        results = [_sweep_job(c) for c in cells]
    keys = [key for key, _ in axes]
    write_table(outdir / "sweep.csv", results, keys)
    print(f"cells={len(cells)} table={outdir / 'sweep.csv'}")
    return EXIT_OK


def write_table(path, summaries, keys) -> None:
    """One plot-ready row per run: the swept keys, seed, then the aggregates."""
    keys = [key for key in keys if key not in ("policy", "seed")]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["policy", "seed", "T", "nag", "steady_nag", "update_cost", "mean_occupancy"])
        for s in summaries:
            c = s["config"]
            w.writerow([c.get(key) for key in keys] + [c.get("policy"), c.get("seed"), s["T"],
                       repr(s["nag"]), repr(s["steady_nag"]), s["update_cost"], repr(s["mean_occupancy"])])


def cmd_offline(args) -> int:
    cfg = merged_config(args, CONFIG_KEYS)
    cat, trace = build_workload(cfg)
    cost = build_cost(cfg, cat)
    batch = sim.trace_batch(trace, cat, cost)
    iters = cfg["iterations"] or len(trace)
    sched = build_schedule(cfg, cat, cost, trace, iters)
    res = sim.offline_optimize(batch, cost.h, cfg["mirror"], iters, sched, component_rng(cfg["seed"], "offline"))
    scale = cost.k * cost.cf
    report = {"iterations": iters, "mirror": oma.canonical_map(cfg["mirror"]),
              "gain_y_bar": res.value_y_bar, "gain_x_bar": res.value_x_bar,
              "nag_y_bar": res.value_y_bar / scale, "config": cfg}
    try:
        opt, _ = sim.fractional_oracle(batch, cost.h, method="both" if args.cross_check else "lp")
        report["fractional_optimum"] = opt
        report["oracle_gap"] = (opt - res.value_y_bar) / opt if opt > 0 else 0.0
        print(f"fractional optimum={opt:.6f} offline={res.value_y_bar:.6f} gap={report['oracle_gap']:.4%}")
    except sim.OracleRefused as exc:
        report["oracle"] = str(exc)
        print(f"oracle skipped: {exc}")
    if args.allocation:
        with Path(args.allocation).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["object_id"] + [f"x{i}" for i in range(cat.dim)] + ["y", "x"])
            for i in range(cat.n):
                w.writerow([i] + [repr(float(v)) for v in cat.points[i]]
                           + [repr(float(res.y_bar[i])), int(res.x_bar[i])])
    if cfg["summary"]:
        Path(cfg["summary"]).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"G(y_bar)={res.value_y_bar:.6f} G(x_bar)={res.value_x_bar:.6f}")
    return EXIT_OK


def cmd_round_check(args) -> int:
    rng = component_rng(args.seed, "rounding")
    rows = []
    ok = True

    def record(name, value, target, passed):
        nonlocal ok
        ok &= bool(passed)
        rows.append((name, value, target, "pass" if passed else "FAIL"))

    if args.scheme in ("all", "depround"):
        for name, res in rounding.check_depround(args.draws, rng).items():
            record(name, res["value"], res["target"], res["passed"])
    if args.scheme in ("all", "coupled"):
        for name, res in rounding.check_coupled(args.draws, rng).items():
            record(name, res["value"], res["target"], res["passed"])
        occ = coupled_occupancy(args.steps, args.h, args.delta, rng)
        record("occupancy_within_delta", occ.within_fraction, ">= 0.99", occ.within_fraction >= 0.99)
        record("occupancy_violation", occ.violation_fraction, f"<= {occ.chernoff_bound:.4f}",
               occ.violation_fraction <= occ.chernoff_bound)
        if args.occupancy:
            with Path(args.occupancy).open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "occupancy", "running_mean"])
                for t, o, m in occ.rows():
                    w.writerow([t, repr(o), repr(m)])
    if args.scheme in ("all", "depround") and args.M > 1:
        f1 = freeze_fetch_rate(1, args.steps, rng)
        fm = freeze_fetch_rate(args.M, args.steps, rng)
        record(f"fetch_rate_M{args.M}_vs_M1", fm, f"< {f1:.4f}", fm < f1)
    if args.movement:
        slope, table = movement_slope(args.seed)
        for T, mv in table:
            rows.append((f"movement_T{T}", mv, "", ""))
        record("movement_loglog_slope", slope, "<= 0.65", slope <= 0.65)
    w = csv.writer(sys.stdout)
    w.writerow(["property", "value", "target", "status"])
    for name, value, target, status in rows:
        w.writerow([name, repr(float(value)) if value != "" else "", target, status])
    if not ok:
        raise PropertyFailure("one or more rounding properties failed")
    return EXIT_OK


def coupled_occupancy(steps: int, h: int, delta: float, rng, n: int | None = None):
    """Occupancy of coupled rounding along an ascent trajectory on a synthetic trace."""
    n = n or 4 * h
    side = int(math.ceil(math.sqrt(n)))
    cat, trace = sim.gen_grid_trace(side, steps, rng, scale=side / 5.0)
    cost = CostModel(k=10, h=h, cf=cat.neighbor_cost(50), metric=cat.metric)
    sched = oma.Schedule("cosine", T=steps, cf=cost.cf)
    pol = AcaiPolicy(cat, cost, oma.NEGENTROPY, sched, rounding.RoundingConfig(rounding.COUPLED, 1, delta), rng)
    states = []
    for t, req in enumerate(trace, start=1):
        pol.step(t, req)
        states.append(pol.state().sum())
    return rounding.occupancy_report(np.asarray(states)[:, None], h, delta)


def freeze_fetch_rate(M: int, steps: int, rng) -> float:
    cat, trace = sim.gen_grid_trace(10, steps, rng, scale=3.0)
    cost = CostModel(k=2, h=10, cf=2.0, metric=cat.metric)
    sched = oma.Schedule("cosine", T=steps, cf=cost.cf)
    pol = AcaiPolicy(cat, cost, oma.NEGENTROPY, sched, rounding.RoundingConfig(rounding.DEPROUND, M), rng)
    series = sim.run(pol, trace, cost)
    return float(series.fetched.mean())


def movement_slope(seed: int, horizons=(1000, 4000, 16000), side: int = 10):
    """Cumulative fractional movement of mirror ascent with eta ~ 1/sqrt(T), and its log-log slope."""
    rng = component_rng(seed, "trace")
    cat, trace = sim.gen_grid_trace(side, max(horizons), rng, scale=side / 5.0)
    cost = CostModel(k=2, h=max(1, cat.n // 10), cf=2.0, metric=cat.metric)
    ranks = RankCache(cat, cost)
    table = []
    for T in horizons:
        cdk = oma.estimate_cdk((r.vector for r in trace), cat, cost.k)
        eta = oma.theorem_rate(T, cdk, cost.cf, cat.n, cost.h)
        y = oma.initial_state(cat.n, cost.h)
        moved = 0.0
        for t in range(T):
            req = trace.request(t)
            y_new = oma.oma_step(y, ranks.batch(req).subgradient(y), eta, oma.NEGENTROPY, cost.h)
            moved += float(np.abs(y_new - y).sum())
            y = y_new
        table.append((T, moved))
    slope = float(np.polyfit(np.log([t for t, _ in table]), np.log([m for _, m in table]), 1)[0])
    return slope, table


def cmd_report(args) -> int:
    summaries = []
    for p in args.inputs:
        path = Path(p)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        for f in files:
            data = json.loads(f.read_text())
            if "config" not in data or "nag" not in data:
                continue
            summaries.append(data)
    if not summaries:
        raise ConfigError("no run summaries found in the given inputs")
    keys = args.keys or []
    if args.out:
        write_table(args.out, summaries, keys)
    else:
        write_table("/dev/stdout", summaries, keys)
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------

FLAG_ALIASES = {"kprime": ["--ktick"], "mirror": ["--map"]}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its keys")
    for key, (typ, _) in CONFIG_KEYS.items():
        flags = ["--" + key.replace("_", "-")] + FLAG_ALIASES.get(key, [])
        p.add_argument(*flags, dest=key, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simcache", description="Similarity caching simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="generate a catalog and an IRM request trace")
    g.add_argument("--kind", choices=("grid", "rank"), default="grid")
    g.add_argument("--side", type=int, default=30)
    g.add_argument("--scale", type=float, default=6.0)
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--T", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--catalog", help="input catalog (rank kind)")
    g.add_argument("--catalog-format", choices=("csv", "fvecs"))
    g.add_argument("--metric", choices=METRICS)
    g.add_argument("--out-catalog", help="where to write the catalog (.csv or .fvecs)")
    g.add_argument("--out-trace", default="trace.csv")
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("run", help="simulate one policy on one trace")
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a grid of configurations")
    _add_config_flags(s)
    s.add_argument("--axis", action="append", default=[], help="key=v1,v2,... (repeatable)")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--outdir", default="sweep")
    s.add_argument("--series", action="store_true", help="also write per-run metric series")
    s.add_argument("--jobs", type=int, help="parallel workers (default: $SIMCACHE_JOBS or 1)")
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("offline", help="best static allocation in hindsight")
    _add_config_flags(o)
    o.add_argument("--allocation", help="CSV of (object id, coordinates, y, x)")
    o.add_argument("--cross-check", action="store_true", help="also solve by mirror ascent and compare")
    o.set_defaults(func=cmd_offline)

    c = sub.add_parser("round-check", help="Monte Carlo checks of the rounding schemes")
    c.add_argument("--scheme", choices=("all", "depround", "coupled"), default="all")
    c.add_argument("--draws", type=int, default=100_000)
    c.add_argument("--steps", type=int, default=2000)
    c.add_argument("--h", type=int, default=1000)
    c.add_argument("--delta", type=float, default=0.05)
    c.add_argument("--M", type=int, default=1)
    c.add_argument("--movement", action="store_true", help="also fit movement against horizon")
    c.add_argument("--occupancy", help="CSV for the coupled-rounding occupancy series")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_round_check)

    rep = sub.add_parser("report", help="merge run summaries into a plot-ready CSV")
    rep.add_argument("inputs", nargs="+", help="summary JSON files or directories")
    rep.add_argument("--keys", nargs="*", help="config keys to include as columns")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PropertyFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
