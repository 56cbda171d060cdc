"""``spotfolio`` command line.

Precedence for every option: command-line flag, then a key of the same name
(dashes or underscores) in the ``--config`` file's ``[spotfolio]`` or
``[<subcommand>]`` section, then the built-in default.

Exit codes: 0 success, 1 usage error, 2 input error, 3 solver did not converge.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import ClusterState, ResourceVector, allocate_private, servers_per_market
from .errors import InvalidSpec, NotConverged, SpotfolioError
from .market_data import (
    SyntheticScenarioSpec,
    align,
    generate_synthetic,
    load_market_catalog,
    load_price_traces,
    read_key_values,
    synthetic_catalog,
    write_market_catalog,
    write_price_traces,
)
from .optimizer import (
    MarketConstraints,
    Portfolio,
    PortfolioProblem,
    default_alpha_grid,
    filter_markets,
    frontier,
    solve,
)
from .risk import (
    PSD_TOLERANCE,
    BidPolicy,
    CovarianceMatrix,
    MttrEstimate,
    ReturnsVector,
    covariance_matrix,
    mttr_table,
    psd_repair,
    returns_vector,
)

log = logging.getLogger("spotfolio")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# artifacts


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(args, inputs) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config_file", "alpha_given")}
    return {
        "subcommand": args.command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in sorted(inputs, key=str)},
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(args, name: str, header, rows, manifest):
    """Write a table as ``name.csv`` or ``name.json`` and the manifest next to it."""
    out = _out_dir(args)
    if args.format == "json":
        records = [dict(zip(header, r)) for r in rows]
        _write(out / f"{name}.json", _json({"manifest": manifest, "rows": records}))
    else:
        _write(out / f"{name}.csv", _csv(header, rows))
    _write(out / "manifest.json", _json(manifest))


# --------------------------------------------------------------------------
# readers for the files this tool writes


def _read_rows(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def read_returns(path) -> ReturnsVector:
    rows = _read_rows(path)
    if not rows or rows[0][:2] != ["market_id", "return"]:
        raise InvalidSpec(f"{path}: expected header market_id,return")
    try:
        return ReturnsVector(tuple(r[0] for r in rows[1:]), np.array([float(r[1]) for r in rows[1:]]))
    except (ValueError, IndexError) as exc:
        raise InvalidSpec(f"{path}: {exc}") from None


def read_covariance(path, kind="price") -> CovarianceMatrix:
    rows = _read_rows(path)
    if not rows:
        raise InvalidSpec(f"{path}: empty matrix file")
    markets = tuple(rows[0])
    try:
        entries = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError as exc:
        raise InvalidSpec(f"{path}: {exc}") from None
    if entries.shape != (len(markets), len(markets)):
        raise InvalidSpec(f"{path}: expected a {len(markets)}x{len(markets)} matrix, got {entries.shape}")
    return CovarianceMatrix(markets, kind, entries)


def read_mttr(path) -> dict:
    rows = _read_rows(path)
    if not rows or rows[0][:4] != ["market_id", "mttr_seconds", "revocation_count", "censored"]:
        raise InvalidSpec(f"{path}: expected header market_id,mttr_seconds,revocation_count,censored")
    return {
        r[0]: MttrEstimate(r[0], float(r[1]), int(r[2]), r[3].strip().lower() == "true")
        for r in rows[1:]
    }


def read_weights(path) -> dict:
    rows = _read_rows(path)
    if not rows or rows[0][:2] != ["market_id", "weight"]:
        raise InvalidSpec(f"{path}: expected header market_id,weight")
    return {r[0]: float(r[1]) for r in rows[1:]}


# --------------------------------------------------------------------------
# subcommands


def _bids(args, catalog, required: bool):
    if args.bid_multiple is None:
        if required:
            raise InvalidSpec(f"--cov-kind {args.cov_kind} needs bid prices: pass --bid-multiple")
        return BidPolicy.on_demand(catalog, 1.0)
    return BidPolicy.on_demand(catalog, args.bid_multiple)


def _need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join(f"--{n}" for n in missing))


def cmd_stats(args):
    _need(args, "catalog", "traces")
    catalog = load_market_catalog(args.catalog)
    traces = load_price_traces(args.traces, catalog)
    aligned = align(traces, args.step)
    sub = catalog.subset(aligned.markets)
    bids = _bids(args, sub, required=args.cov_kind != "price")
    ret = returns_vector(aligned, sub)
    cov = covariance_matrix(aligned, sub, bids, args.cov_kind)
    if cov.repaired:
        log.warning("covariance matrix was not PSD; negative eigenvalues clipped")
    table = mttr_table(aligned, bids)
    manifest = _manifest(args, [args.catalog, args.traces])
    out = _out_dir(args)
    ret_rows = [(m, float(v)) for m, v in zip(ret.markets, ret.values)]
    mttr_rows = [(m, e.mttr_seconds, e.revocation_count, "true" if e.censored else "false") for m, e in table.items()]
    if args.format == "json":
        _write(out / "stats.json", _json({
            "manifest": manifest,
            "returns": dict(ret_rows),
            "covariance": {"kind": cov.kind, "markets": list(cov.markets), "entries": cov.entries.tolist(),
                           "repaired": cov.repaired},
            "mttr": {m: {"mttr_seconds": e.mttr_seconds, "revocation_count": e.revocation_count,
                         "censored": e.censored} for m, e in table.items()},
        }))
    else:
        _write(out / "returns.csv", _csv(("market_id", "return"), ret_rows))
        _write(out / "covariance.csv", _csv(cov.markets, [[float(x) for x in row] for row in cov.entries]))
        _write(out / "mttr.csv", _csv(("market_id", "mttr_seconds", "revocation_count", "censored"), mttr_rows))
    _write(out / "manifest.json", _json(manifest))
    return 0


def _load_stats(args):
    _need(args, "returns", "covariance")
    ret = read_returns(args.returns)
    cov = read_covariance(args.covariance, args.cov_kind)
    if tuple(cov.markets) != tuple(ret.markets):
        raise InvalidSpec("returns and covariance files list different markets")
    if cov.min_eigenvalue() < -PSD_TOLERANCE:
        log.warning("%s is not PSD (min eigenvalue %.3g); repaired by eigenvalue clipping",
                    args.covariance, cov.min_eigenvalue())
        cov = psd_repair(cov)
    inputs = [args.returns, args.covariance]
    return ret, cov, inputs


def _constraints(args) -> MarketConstraints:
    return MarketConstraints(
        job_length_seconds=args.job_length,
        min_mttr_seconds=args.min_mttr,
        include=tuple(args.include or ()),
        exclude=tuple(args.exclude or ()),
        min_cpu=args.min_cpu,
        min_mem=args.min_mem,
        max_markets=args.max_markets,
    )


def _candidates(args, ret, inputs):
    constraints = _constraints(args)
    if constraints.is_default:
        return list(ret.markets)
    _need(args, "catalog", "mttr")
    catalog = load_market_catalog(args.catalog).subset(ret.markets)
    inputs.extend([args.catalog, args.mttr])
    return filter_markets(catalog, read_mttr(args.mttr), constraints, ret)


def cmd_portfolio(args):
    ret, cov, inputs = _load_stats(args)
    cands = _candidates(args, ret, inputs)
    problem = PortfolioProblem.from_stats(ret.subset(cands), cov.subset(cands), args.alpha)
    best = solve(problem)
    p = Portfolio.from_weights(problem.markets, best.truncated().weights, problem.c, problem.V,
                               problem.alpha, best.gap, best.iterations)
    manifest = _manifest(args, inputs)
    rows = [(m, float(w)) for m, w in zip(p.markets, p.weights) if w > 0]
    _emit(args, "weights", ("market_id", "weight"), rows, manifest)
    _write(_out_dir(args) / "portfolio.json", _json({
        "manifest": manifest, "alpha": p.alpha, "expected_return": p.expected_return,
        "risk": p.risk, "objective": p.objective, "gap": p.gap, "iterations": p.iterations,
    }))
    return 0


def cmd_frontier(args):
    ret, cov, inputs = _load_stats(args)
    cands = _candidates(args, ret, inputs)
    if args.alphas:
        alphas = sorted(float(a) for a in args.alphas.split(","))
    elif args.alpha_given:
        alphas = [args.alpha]
    else:
        alphas = default_alpha_grid()
    points = frontier(ret.subset(cands), cov.subset(cands), alphas)
    header = ("alpha", "expected_return", "risk") + tuple(f"w:{m}" for m in cands)
    rows = [(pt.alpha, pt.expected_return, pt.risk, *[float(w) for w in pt.weights]) for pt in points]
    _emit(args, "frontier", header, rows, _manifest(args, inputs))
    return 0


def cmd_allocate(args):
    _need(args, "weights", "catalog", "cpu", "mem")
    catalog = load_market_catalog(args.catalog)
    weights = read_weights(args.weights)
    r = ResourceVector(args.cpu, args.mem)
    if r.cpu <= 0 and r.mem <= 0:
        raise InvalidSpec("the resource vector needs a positive component")
    counts = servers_per_market(weights, r, catalog)
    cluster = ClusterState(catalog)
    plan = allocate_private("cli", weights, r, catalog, cluster)
    header = ("market_id", "weight", "servers", "allocated_cpu", "allocated_mem", "surplus_cpu", "surplus_mem")
    rows = []
    for m in sorted(plan.markets):
        servers = cluster.app_servers("cli", m)
        cap = ResourceVector(sum(s.capacity.cpu for s in servers), sum(s.capacity.mem for s in servers))
        got = plan.markets[m].allocated
        rows.append((m, weights[m], counts[m], got.cpu, got.mem, cap.cpu - got.cpu, cap.mem - got.mem))
    _emit(args, "allocation", header, rows, _manifest(args, [args.catalog, args.weights]))
    sys.stdout.write(_csv(header, rows))
    return 0


def _scenario_seed_state(path) -> tuple[bool, bool]:
    """(draws random numbers, names a seed) for a scenario file."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.read(path, encoding="utf-8")
    synthetic = parser.has_section("synthetic")
    seeded = parser.has_option("scenario", "seed") or (synthetic and parser.has_option("synthetic", "seed"))
    return synthetic, seeded


def cmd_simulate(args):
    from .sim import load_scenario, run

    _need(args, "scenario")
    if not Path(args.scenario).exists():
        raise InvalidSpec(f"{args.scenario}: no such file")
    random, has_seed = _scenario_seed_state(args.scenario)
    if random and args.seed is None and not has_seed:
        raise UsageError("the scenario generates synthetic traces: pass --seed or set seed in the file")
    overrides = {"seed": str(args.seed)} if args.seed is not None else {}
    scenario = load_scenario(args.scenario, overrides)
    report = run(scenario, record_events=args.events)
    manifest = _manifest(args, [args.scenario])
    out = _out_dir(args)
    doc = report.to_dict(include_events=args.events)
    doc["manifest"] = manifest
    _write(out / "report.json", _json(doc))
    _write(out / "summary.csv", report.summary_csv())
    _write(out / "manifest.json", _json(manifest))
    return 0


def cmd_synth(args):
    _need(args, "spec")
    values = read_key_values(args.spec, "synthetic")
    if args.seed is not None:
        values["seed"] = str(args.seed)
    elif "seed" not in values:
        raise UsageError("synth draws random numbers: pass --seed or set seed in the spec file")
    spec = SyntheticScenarioSpec.from_mapping(values)
    inputs = [args.spec]
    out = _out_dir(args)
    if args.catalog is not None:
        catalog = load_market_catalog(args.catalog)
        inputs.append(args.catalog)
    else:
        catalog = synthetic_catalog(spec.market_count or args.markets, seed=spec.seed)
        write_market_catalog(out / "catalog.csv", catalog)
    traces = generate_synthetic(spec, catalog, args.duration)
    write_price_traces(out / "traces.csv", traces)
    _write(out / "manifest.json", _json(_manifest(args, inputs)))
    return 0


def cmd_compare(args):
    from .sim import compare_policies, load_matrix

    _need(args, "matrix")
    cells, app_id = load_matrix(args.matrix)
    rows = compare_policies(cells, app_id)
    header = tuple(rows[0]) if rows else ()
    _emit(args, "grid", header, [tuple(r.values()) for r in rows], _manifest(args, [args.matrix]))
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p, seed=False):
    p.add_argument("--catalog", help="market catalog CSV")
    p.add_argument("--traces", help="price trace CSV")
    p.add_argument("--out-dir", default=".", help="directory for output files (default: .)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--cov-kind", choices=("price", "revocation", "hybrid"), default="price")
    p.add_argument("--bid-multiple", type=float, default=None,
                   help="bid = multiple x on-demand price (MTTR defaults to 1.0; needed for "
                        "revocation and hybrid matrices)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", dest="config_file", help="INI file supplying defaults for any flag")


def _stats_inputs(p):
    p.add_argument("--returns", help="returns.csv from `stats`")
    p.add_argument("--covariance", help="covariance.csv from `stats`")
    p.add_argument("--mttr", help="mttr.csv from `stats` (needed for MTTR constraints)")
    p.add_argument("--alpha", type=float, default=1.0, help="risk aversion (default 1.0)")
    p.add_argument("--job-length", type=float, default=None, help="seconds; markets need MTTR >= 2x this")
    p.add_argument("--min-mttr", type=float, default=None, help="seconds; overrides --job-length")
    p.add_argument("--include", action="append", help="market id glob; repeatable")
    p.add_argument("--exclude", action="append", help="market id glob; repeatable")
    p.add_argument("--min-cpu", type=int, default=None)
    p.add_argument("--min-mem", type=float, default=None)
    p.add_argument("--max-markets", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spotfolio", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"spotfolio {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("stats", help="returns, covariance and MTTR tables from traces")
    _common(p)
    p.add_argument("--step", type=int, default=300, help="resampling step in seconds (default 300)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("portfolio", help="optimal weights at one alpha")
    _common(p)
    _stats_inputs(p)
    p.set_defaults(func=cmd_portfolio)

    p = sub.add_parser("frontier", help="efficient frontier over an alpha grid")
    _common(p)
    _stats_inputs(p)
    p.add_argument("--alphas", help="comma-separated alpha values (default: 0 plus 25 log-spaced in [1e-3, 1e3])")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("allocate", help="server counts and surplus for a weights file")
    _common(p)
    p.add_argument("--weights", help="weights.csv from `portfolio`")
    p.add_argument("--cpu", type=float, help="requested cores")
    p.add_argument("--mem", type=float, help="requested memory in GB")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("simulate", help="replay a scenario file")
    _common(p)
    p.add_argument("scenario", nargs="?", help="scenario INI file")
    p.add_argument("--events", action="store_true", help="include the full event and billing log")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="generate synthetic price traces")
    _common(p)
    p.add_argument("spec", nargs="?", help="synthetic scenario spec file")
    p.add_argument("--duration", type=int, default=7 * 86400, help="seconds (default one week)")
    p.add_argument("--markets", type=int, default=8, help="catalog size when no --catalog is given")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", help="run a policy matrix")
    _common(p)
    p.add_argument("matrix", nargs="?", help="policy matrix INI file")
    p.set_defaults(func=cmd_compare)
    return parser


def _config_defaults(path, command, parser) -> dict:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if not cp.read(path, encoding="utf-8"):
        raise InvalidSpec(f"{path}: cannot read config file")
    values = {}
    for section in ("spotfolio", command):
        if cp.has_section(section):
            values.update({k.replace("-", "_"): v for k, v in cp.items(section)})
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    out = {}
    for action in sub._actions:
        if action.dest in values:
            raw = values.pop(action.dest)
            if isinstance(action, argparse._StoreTrueAction):
                out[action.dest] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                out[action.dest] = [v.strip() for v in raw.split(",") if v.strip()]
            else:
                out[action.dest] = action.type(raw) if action.type else raw
    if values:
        raise InvalidSpec(f"{path}: unknown keys {', '.join(sorted(values))}")
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("spotfolio: %(message)s"))
    log.addHandler(handler)
    log.propagate = False
    log.setLevel(logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.verbose:
            log.setLevel(logging.INFO)
        if args.config_file:
            defaults = _config_defaults(args.config_file, args.command, parser)
            sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
            sub.choices[args.command].set_defaults(**defaults)
            args = parser.parse_args(argv)
        args.alpha_given = "--alpha" in argv or any(a.startswith("--alpha=") for a in argv)
        return args.func(args)
    except UsageError as exc:
        print(f"spotfolio: usage error: {exc}", file=sys.stderr)
        return 1
    except NotConverged as exc:
        print(f"spotfolio: {exc}", file=sys.stderr)
        return 3
    except (SpotfolioError, OSError) as exc:
        if isinstance(exc, OSError) and exc.filename:
            print(f"spotfolio: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        else:
            print(f"spotfolio: {exc}", file=sys.stderr)
        return 2
    finally:
        log.removeHandler(handler)


__all__ = ["main", "build_parser"]
