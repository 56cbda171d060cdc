"""Scenario and application descriptions, plus their file formats.

A scenario file is INI text::

    [scenario]
    catalog = catalog.csv        # omitted with [synthetic]: a generated catalog
    traces = traces.csv          # or a [synthetic] section
    duration_seconds = 172800    # horizon of synthetic traces
    tick_seconds = 300
    warning_seconds = 120
    sharing_mode = private       # or shared
    seed = 7
    jobs = jobs.csv              # optional arrival trace

    [synthetic]
    discount_fraction = 0.2

    [app:kmeans]
    kind = batch-checkpoint
    work_seconds = 36000
    cpu = 16
    mem = 64
    checkpoint_seconds = 120
    recovery = eager

Relative paths resolve against the scenario file's directory.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..allocator import DEFAULT_HOLD_SECONDS, ResourceVector, demand_vector
from ..errors import InvalidSpec, MalformedRow
from ..market_data import (
    MarketCatalog,
    PriceSeries,
    SyntheticScenarioSpec,
    UniformSeriesSet,
    align,
    series_from_ticks,
    generate_synthetic,
    load_market_catalog,
    load_price_traces,
    synthetic_catalog,
)
from ..optimizer import MarketConstraints
from ..risk import BidPolicy

APP_KINDS = ("batch-checkpoint", "rigid", "bag-of-tasks")
RECOVERY_POLICIES = ("eager", "none", "progress-threshold")
SHARING_MODES = ("private", "shared")


@dataclass(frozen=True)
class ApplicationSpec:
    """One job submitted to the cluster.

    ``work_seconds`` is the run time with the full resource vector ``r``.
    ``checkpoint_seconds`` (delta) of ``None`` disables checkpointing.
    ``weights`` pins the portfolio instead of optimising one over the
    candidates that pass ``constraints``.
    """

    id: str
    kind: str
    work_seconds: float
    r: ResourceVector
    alpha: float = 1.0
    constraints: MarketConstraints = MarketConstraints()
    checkpoint_seconds: float | None = None
    recovery: str = "eager"
    progress_threshold: float = 0.7
    price_threshold: float | None = None
    arrival: float = 0.0
    weights: Mapping[str, float] | None = None
    task_seconds: float | None = None
    slots: int = 10

    def __post_init__(self):
        if self.kind not in APP_KINDS:
            raise InvalidSpec(f"app {self.id}: kind must be one of {APP_KINDS}, got {self.kind!r}")
        if not self.work_seconds > 0:
            raise InvalidSpec(f"app {self.id}: work_seconds must be > 0")
        if self.checkpoint_seconds is not None and self.checkpoint_seconds < 0:
            raise InvalidSpec(f"app {self.id}: checkpoint_seconds must be >= 0")
        if self.recovery not in RECOVERY_POLICIES:
            raise InvalidSpec(f"app {self.id}: recovery must be one of {RECOVERY_POLICIES}")
        if not 0.0 < self.progress_threshold < 1.0:
            raise InvalidSpec(f"app {self.id}: progress_threshold must lie in (0, 1)")
        if self.price_threshold is not None and not self.price_threshold > 0:
            raise InvalidSpec(f"app {self.id}: price_threshold must be > 0")
        if self.arrival < 0:
            raise InvalidSpec(f"app {self.id}: arrival must be >= 0")
        if self.alpha < 0:
            raise InvalidSpec(f"app {self.id}: alpha must be >= 0")
        if self.slots < 1:
            raise InvalidSpec(f"app {self.id}: slots must be >= 1")
        if self.task_seconds is not None and not self.task_seconds > 0:
            raise InvalidSpec(f"app {self.id}: task_seconds must be > 0")
        if self.weights is not None:
            w = {m: float(x) for m, x in self.weights.items() if float(x) > 0}
            if not w:
                raise InvalidSpec(f"app {self.id}: weights must have a positive entry")
            total = sum(w.values())
            object.__setattr__(self, "weights", {m: x / total for m, x in sorted(w.items())})

    @property
    def checkpointing(self) -> bool:
        return bool(self.checkpoint_seconds)


@dataclass(frozen=True, eq=False)
class Scenario:
    catalog: MarketCatalog
    prices: UniformSeriesSet
    bids: BidPolicy
    applications: tuple
    warning_seconds: float = 120.0
    soft_warning_fraction: float = 0.9
    sharing_mode: str = "private"
    seed: int = 0
    replenish_latency: float = 300.0
    hold_seconds: float = DEFAULT_HOLD_SECONDS
    mttr_refresh_seconds: float = 300.0
    cov_kind: str = "price"
    first_fit: bool = False
    charge_warning_period: bool = True
    black_swan_time: float | None = None

    def __post_init__(self):
        if self.sharing_mode not in SHARING_MODES:
            raise InvalidSpec(f"sharing_mode must be one of {SHARING_MODES}")
        if self.warning_seconds < 0:
            raise InvalidSpec("warning_seconds must be >= 0")
        if not 0 < self.soft_warning_fraction <= 1:
            raise InvalidSpec("soft_warning_fraction must lie in (0, 1]")
        if self.replenish_latency < 0 or self.hold_seconds < 0 or self.mttr_refresh_seconds <= 0:
            raise InvalidSpec("latency and hold durations must be >= 0, refresh period > 0")
        ids = [a.id for a in self.applications]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("application ids must be unique")
        for m in self.prices.markets:
            if m not in self.catalog:
                raise InvalidSpec(f"trace market {m!r} missing from catalog")
        object.__setattr__(self, "applications", tuple(self.applications))

    @property
    def tick_seconds(self) -> int:
        return self.prices.grid.step

    @property
    def start(self) -> float:
        return float(self.prices.grid.start)

    @property
    def horizon(self) -> float:
        """Prices are known up to one tick past the last sample."""
        g = self.prices.grid
        return float(g.start + g.count * g.step)

    def with_apps(self, apps: Sequence[ApplicationSpec]) -> "Scenario":
        return replace(self, applications=tuple(apps))

    def evolve(self, **changes) -> "Scenario":
        return replace(self, **changes)

    @classmethod
    def build(
        cls,
        catalog: MarketCatalog,
        traces,
        applications: Sequence[ApplicationSpec] = (),
        bids: BidPolicy | None = None,
        tick_seconds: int = 300,
        **options,
    ) -> "Scenario":
        """Align raw traces on a ``tick_seconds`` grid and bid on-demand unless told otherwise."""
        prices = traces if isinstance(traces, UniformSeriesSet) else align(traces, tick_seconds)
        bids = bids if bids is not None else BidPolicy.on_demand(catalog.subset(prices.markets))
        return cls(catalog.subset(prices.markets), prices, bids, tuple(applications), **options)


# --------------------------------------------------------------------------
# parsing


def _opt_float(raw):
    raw = str(raw).strip()
    return None if raw.lower() in ("", "none", "off", "no") else float(raw)


def _patterns(raw) -> tuple:
    return tuple(p.strip() for p in str(raw).split(",") if p.strip())


def _parse_weights(raw) -> dict:
    out = {}
    for part in _patterns(raw):
        market, _, w = part.rpartition(":")
        if not market:
            raise InvalidSpec(f"weights entries must look like market:weight, got {part!r}")
        out[market] = float(w)
    return out


def _parse_recovery(raw):
    raw = str(raw).strip().lower()
    if raw.startswith("progress-threshold"):
        if "(" in raw:
            return "progress-threshold", float(raw[raw.index("(") + 1: raw.rindex(")")])
        return "progress-threshold", None
    return raw, None


_CONSTRAINT_KEYS = {
    "job_length_seconds": float,
    "mttr_factor": float,
    "min_mttr_seconds": float,
    "min_cpu": int,
    "min_mem": float,
    "max_markets": int,
}


def app_from_mapping(app_id: str, values: Mapping[str, str]) -> ApplicationSpec:
    v = {k.strip().lower(): str(x).strip() for k, x in values.items()}
    known = {f.name for f in fields(ApplicationSpec)} | set(_CONSTRAINT_KEYS) | {
        "cpu", "mem", "include", "exclude", "markets",
    }
    unknown = sorted(set(v) - known)
    if unknown:
        raise InvalidSpec(f"app {app_id}: unknown keys {', '.join(unknown)}")
    try:
        kw = {}
        for key, conv in _CONSTRAINT_KEYS.items():
            if v.get(key, "") != "":
                kw[key] = conv(v[key])
        include = _patterns(v.get("include", v.get("markets", "")))
        constraints = MarketConstraints(include=include, exclude=_patterns(v.get("exclude", "")), **kw)
        recovery, p = _parse_recovery(v.get("recovery", "eager"))
        threshold = p if p is not None else float(v.get("progress_threshold", 0.7))
        return ApplicationSpec(
            id=app_id,
            kind=v.get("kind", "batch-checkpoint"),
            work_seconds=float(v["work_seconds"]),
            r=demand_vector(float(v.get("cpu", 0)), float(v.get("mem", 0))),
            alpha=float(v.get("alpha", 1.0)),
            constraints=constraints,
            checkpoint_seconds=_opt_float(v.get("checkpoint_seconds", "")),
            recovery=recovery,
            progress_threshold=threshold,
            price_threshold=_opt_float(v.get("price_threshold", "")),
            arrival=float(v.get("arrival", 0.0)),
            weights=_parse_weights(v["weights"]) if v.get("weights") else None,
            task_seconds=_opt_float(v.get("task_seconds", "")),
            slots=int(v.get("slots", 10)),
        )
    except KeyError as exc:
        raise InvalidSpec(f"app {app_id}: missing key {exc.args[0]}") from None
    except ValueError as exc:
        raise InvalidSpec(f"app {app_id}: {exc}") from None


JOB_COLUMNS = ("app_id", "arrival", "kind", "work_seconds", "cpu", "mem")


def load_jobs(path) -> list[ApplicationSpec]:
    """Job-arrival CSV; required columns are ``JOB_COLUMNS``, other app keys are optional columns."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in JOB_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise MalformedRow(path, 1, f"missing columns {', '.join(missing)}")
        jobs = []
        for line, row in enumerate(reader, start=2):
            values = {k: x for k, x in row.items() if k != "app_id" and x not in (None, "")}
            try:
                jobs.append(app_from_mapping(row["app_id"], values))
            except InvalidSpec as exc:
                raise MalformedRow(path, line, str(exc)) from None
    return jobs


def write_jobs(path, jobs: Sequence[ApplicationSpec]) -> None:
    cols = JOB_COLUMNS + ("alpha", "checkpoint_seconds", "recovery")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for j in jobs:
            w.writerow([
                j.id, repr(j.arrival), j.kind, repr(j.work_seconds), repr(j.r.cpu), repr(j.r.mem),
                repr(j.alpha), "" if j.checkpoint_seconds is None else repr(j.checkpoint_seconds), j.recovery,
            ])


_SCENARIO_KEYS = {
    "catalog", "traces", "duration_seconds", "tick_seconds", "warning_seconds",
    "soft_warning_fraction", "bid_multiple", "sharing_mode", "seed", "replenish_latency_seconds",
    "hold_seconds", "mttr_refresh_seconds", "cov_kind", "packing", "charge_warning_period", "jobs",
}


def _bool(raw) -> bool:
    raw = str(raw).strip().lower()
    if raw in ("1", "true", "yes", "on"):
        return True
    if raw in ("0", "false", "no", "off"):
        return False
    raise InvalidSpec(f"expected a boolean, got {raw!r}")


def load_scenario(path, overrides: Mapping[str, str] | None = None) -> Scenario:
    """Parse a scenario file; ``overrides`` replace ``[scenario]`` keys."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise InvalidSpec(f"{path}: {exc}") from None
    if not parser.has_section("scenario"):
        raise InvalidSpec(f"{path}: missing [scenario] section")
    s = dict(parser.items("scenario"))
    s.update(overrides or {})
    unknown = sorted(set(s) - _SCENARIO_KEYS)
    if unknown:
        raise InvalidSpec(f"{path}: unknown scenario keys {', '.join(unknown)}")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    seed = int(s.get("seed", 0))
    tick = int(s.get("tick_seconds", 300))
    synthetic = None
    if parser.has_section("synthetic"):
        syn = dict(parser.items("synthetic"))
        syn.setdefault("seed", str(seed))
        syn.setdefault("step_seconds", str(tick))
        synthetic = SyntheticScenarioSpec.from_mapping(syn)

    if "catalog" in s:
        catalog = load_market_catalog(resolve(s["catalog"]))
    elif synthetic is not None:
        catalog = synthetic_catalog(synthetic.market_count or 8, seed=synthetic.seed)
    else:
        raise InvalidSpec(f"{path}: needs a catalog or a [synthetic] section")

    if "traces" in s:
        traces = load_price_traces(resolve(s["traces"]), catalog)
    elif synthetic is not None:
        if "duration_seconds" not in s:
            raise InvalidSpec(f"{path}: synthetic traces need duration_seconds")
        traces = generate_synthetic(synthetic, catalog, int(s["duration_seconds"]))
    else:
        raise InvalidSpec(f"{path}: needs traces or a [synthetic] section")

    apps = [app_from_mapping(sec.split(":", 1)[1].strip(), dict(parser.items(sec)))
            for sec in parser.sections() if sec.startswith("app:")]
    if "jobs" in s:
        apps.extend(load_jobs(resolve(s["jobs"])))

    packing = s.get("packing", "best-fit")
    if packing not in ("best-fit", "first-fit"):
        raise InvalidSpec("packing must be best-fit or first-fit")
    sub = catalog.subset(sorted(traces))
    return Scenario.build(
        sub,
        traces,
        apps,
        bids=BidPolicy.on_demand(sub, float(s.get("bid_multiple", 1.0))),
        tick_seconds=tick,
        warning_seconds=float(s.get("warning_seconds", 120)),
        soft_warning_fraction=float(s.get("soft_warning_fraction", 0.9)),
        sharing_mode=s.get("sharing_mode", "private"),
        seed=seed,
        replenish_latency=float(s.get("replenish_latency_seconds", 300)),
        hold_seconds=float(s.get("hold_seconds", DEFAULT_HOLD_SECONDS)),
        mttr_refresh_seconds=float(s.get("mttr_refresh_seconds", 300)),
        cov_kind=s.get("cov_kind", "price"),
        first_fit=packing == "first-fit",
        charge_warning_period=_bool(s.get("charge_warning_period", "true")),
        black_swan_time=None if synthetic is None or synthetic.black_swan_time is None
        else float(synthetic.black_swan_time),
    )


# --------------------------------------------------------------------------
# synthetic workloads


def synthetic_jobs(
    n: int,
    seed: int,
    mean_interarrival: float = 1800.0,
    work_range: tuple = (3600.0, 14400.0),
    cpu_choices: Sequence[float] = (1, 2, 3, 4, 6, 8, 12),
    mem_per_cpu: float = 3.0,
    alphas: Sequence[float] = (0.1, 1.0, 10.0),
    kind: str = "batch-checkpoint",
    checkpoint_seconds: float | None = 60.0,
) -> list[ApplicationSpec]:
    """``n`` jobs with Poisson arrivals and random sizes, drawn from ``default_rng(seed)``."""
    if n < 1:
        raise InvalidSpec("need at least one job")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(mean_interarrival, n)
    gaps[0] = 0.0
    arrivals = np.cumsum(gaps)
    work = rng.uniform(*work_range, n)
    cpus = rng.choice(np.asarray(cpu_choices, dtype=float), n)
    alpha_idx = rng.integers(len(alphas), size=n)
    width = int(math.log10(n)) + 1
    return [
        ApplicationSpec(
            id=f"job{i:0{width}d}",
            kind=kind,
            work_seconds=float(round(work[i])),
            r=ResourceVector(float(cpus[i]), float(cpus[i] * mem_per_cpu)),
            alpha=float(alphas[alpha_idx[i]]),
            checkpoint_seconds=checkpoint_seconds,
            arrival=float(round(arrivals[i])),
        )
        for i in range(n)
    ]


def fixed_portfolio(markets: Sequence[str]) -> dict:
    """Equal weights over ``markets``."""
    return {m: 1.0 / len(markets) for m in markets}


def series_dict(prices: UniformSeriesSet) -> dict[str, PriceSeries]:
    return {m: series_from_ticks(m, prices.grid, prices.values[i]) for i, m in enumerate(prices.markets)}


__all__ = [
    "APP_KINDS", "RECOVERY_POLICIES", "SHARING_MODES", "ApplicationSpec", "Scenario",
    "app_from_mapping", "load_jobs", "write_jobs", "load_scenario", "synthetic_jobs",
    "fixed_portfolio", "series_dict",
]
