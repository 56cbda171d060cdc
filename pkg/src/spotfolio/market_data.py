"""Spot-price traces, market catalogs, uniform grids and synthetic scenarios.

Prices are event based: a trace holds one sample per price change and the
price is assumed constant until the next sample. Everything downstream works
on a :class:`UniformSeriesSet`, i.e. every market sampled on one shared grid
by carrying the last observation forward.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DuplicateMarket,
    EmptyTrace,
    InvalidSpec,
    MalformedRow,
    NoCommonWindow,
    NonPositiveValue,
    NoPriorObservation,
    UnknownMarket,
)

CATALOG_HEADER = ("market_id", "zone", "cpu_cores", "mem_gb", "on_demand_price")
TRACE_HEADER = ("timestamp", "market_id", "price")

DEFAULT_STEP_SECONDS = 300
DEFAULT_SPIKE_DWELL_TICKS = 3
SPIKE_MULTIPLE = 10.0


@dataclass(frozen=True)
class MarketCatalogEntry:
    id: str
    zone: str
    cpu: int
    mem: float
    on_demand_price: float

    def __post_init__(self):
        if not self.id:
            raise InvalidSpec("market id must be non-empty")
        if self.cpu < 1:
            raise NonPositiveValue(f"{self.id}: cpu_cores must be >= 1, got {self.cpu}")
        if not self.mem > 0:
            raise NonPositiveValue(f"{self.id}: mem_gb must be > 0, got {self.mem}")
        if not self.on_demand_price > 0:
            raise NonPositiveValue(
                f"{self.id}: on_demand_price must be > 0, got {self.on_demand_price}"
            )


class MarketCatalog(Mapping):
    """Read-only mapping ``market id -> MarketCatalogEntry`` in sorted id order."""

    def __init__(self, entries: Iterable[MarketCatalogEntry]):
        by_id = {}
        for e in entries:
            if e.id in by_id:
                raise DuplicateMarket(f"duplicate market id {e.id!r}")
            by_id[e.id] = e
        self._ids = tuple(sorted(by_id))
        self._by_id = {k: by_id[k] for k in self._ids}

    def __getitem__(self, market_id):
        try:
            return self._by_id[market_id]
        except KeyError:
            raise UnknownMarket(f"market {market_id!r} not in catalog") from None

    def __iter__(self):
        return iter(self._ids)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, market_id):
        return market_id in self._by_id

    def __repr__(self):
        return f"MarketCatalog({len(self)} markets)"

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    def entries(self) -> list[MarketCatalogEntry]:
        return [self._by_id[k] for k in self._ids]

    def subset(self, ids: Iterable[str]) -> "MarketCatalog":
        return MarketCatalog(self[i] for i in ids)

    def on_demand(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self[i].on_demand_price for i in ids], dtype=float)


@dataclass(frozen=True, eq=False)
class PriceSeries:
    market: str
    timestamps: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        px = np.asarray(self.prices, dtype=float)
        if ts.ndim != 1 or ts.shape != px.shape:
            raise InvalidSpec(f"{self.market}: timestamps and prices must be 1-D and equal length")
        if ts.size == 0:
            raise EmptyTrace(f"market {self.market!r} has no samples")
        if np.any(np.diff(ts) <= 0):
            raise InvalidSpec(f"{self.market}: timestamps must be strictly increasing")
        if np.any(~(px > 0)):
            raise NonPositiveValue(f"{self.market}: prices must be > 0")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "prices", px)

    def __len__(self):
        return self.timestamps.size

    def __eq__(self, other):
        if not isinstance(other, PriceSeries):
            return NotImplemented
        return (
            self.market == other.market
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.prices, other.prices)
        )

    @property
    def span(self) -> tuple[int, int]:
        return int(self.timestamps[0]), int(self.timestamps[-1])


@dataclass(frozen=True)
class Grid:
    start: int
    step: int
    count: int

    def __post_init__(self):
        if self.step <= 0:
            raise InvalidSpec("grid step must be > 0")
        if self.count < 1:
            raise InvalidSpec("grid count must be >= 1")

    @property
    def times(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count, dtype=np.int64)

    @property
    def end(self) -> int:
        """Exclusive end of the last tick's interval."""
        return self.start + self.step * self.count

    def tick_of(self, t: float) -> int:
        """Index of the tick whose interval contains time ``t`` (clamped)."""
        k = int(math.floor((t - self.start) / self.step))
        return min(max(k, 0), self.count - 1)


@dataclass(frozen=True, eq=False)
class UniformSeriesSet:
    markets: tuple[str, ...]
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.markets), self.grid.count):
            raise InvalidSpec(
                f"values shape {v.shape} does not match "
                f"{len(self.markets)} markets x {self.grid.count} ticks"
            )
        if np.any(~(v > 0)):
            raise NonPositiveValue("uniform series values must be > 0")
        object.__setattr__(self, "markets", tuple(self.markets))
        object.__setattr__(self, "values", v)

    def index(self, market: str) -> int:
        try:
            return self.markets.index(market)
        except ValueError:
            raise UnknownMarket(f"market {market!r} not in series set") from None

    def row(self, market: str) -> np.ndarray:
        return self.values[self.index(market)]

    def subset(self, markets: Iterable[str]) -> "UniformSeriesSet":
        markets = tuple(markets)
        rows = [self.index(m) for m in markets]
        return UniformSeriesSet(markets, self.grid, self.values[rows])


# --------------------------------------------------------------------------
# CSV ingestion


def _open_csv(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path, path.open(newline="", encoding="utf-8")


def _check_header(path, header, expected):
    got = tuple(h.strip() for h in header) if header else ()
    if got != expected:
        raise MalformedRow(path, 1, f"expected header {','.join(expected)}, got {','.join(got)}")


def load_market_catalog(path) -> MarketCatalog:
    path, fh = _open_csv(path)
    entries = []
    seen = {}
    with fh:
        reader = csv.reader(fh)
        _check_header(path, next(reader, None), CATALOG_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CATALOG_HEADER):
                raise MalformedRow(path, lineno, f"expected {len(CATALOG_HEADER)} fields, got {len(row)}")
            market_id, zone, cpu, mem, price = (c.strip() for c in row)
            try:
                cpu_f = float(cpu)
                mem_f = float(mem)
                price_f = float(price)
            except ValueError as exc:
                raise MalformedRow(path, lineno, str(exc)) from None
            if cpu_f != int(cpu_f):
                raise MalformedRow(path, lineno, f"cpu_cores must be an integer, got {cpu}")
            if not market_id:
                raise MalformedRow(path, lineno, "empty market_id")
            if market_id in seen:
                raise DuplicateMarket(
                    f"{path}:{lineno}: market {market_id!r} already defined on line {seen[market_id]}"
                )
            seen[market_id] = lineno
            try:
                entries.append(MarketCatalogEntry(market_id, zone, int(cpu_f), mem_f, price_f))
            except NonPositiveValue as exc:
                raise NonPositiveValue(f"{path}:{lineno}: {exc}") from None
    return MarketCatalog(entries)


def load_price_traces(path, catalog: MarketCatalog) -> dict[str, PriceSeries]:
    path, fh = _open_csv(path)
    rows: dict[str, dict[int, tuple[float, int]]] = {}
    with fh:
        reader = csv.reader(fh)
        _check_header(path, next(reader, None), TRACE_HEADER)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRACE_HEADER):
                raise MalformedRow(path, lineno, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
            ts_s, market_id, price_s = (c.strip() for c in row)
            if market_id not in catalog:
                raise UnknownMarket(f"{path}:{lineno}: market {market_id!r} not in catalog")
            try:
                ts = int(float(ts_s))  # sub-second precision is truncated
                price = float(price_s)
            except ValueError as exc:
                raise MalformedRow(path, lineno, str(exc)) from None
            if not price > 0:
                raise NonPositiveValue(f"{path}:{lineno}: price must be > 0, got {price_s}")
            per_market = rows.setdefault(market_id, {})
            if ts in per_market and per_market[ts][0] != price:
                raise MalformedRow(
                    path, lineno,
                    f"conflicting price for {market_id} at {ts} (line {per_market[ts][1]})",
                )
            per_market.setdefault(ts, (price, lineno))
    missing = [m for m in catalog if m not in rows]
    if missing:
        raise EmptyTrace(f"{path}: no samples for catalog market(s) {', '.join(missing)}")
    out = {}
    for market in catalog:
        samples = sorted(rows[market].items())
        out[market] = PriceSeries(
            market,
            np.array([t for t, _ in samples], dtype=np.int64),
            np.array([p for _, (p, _) in samples], dtype=float),
        )
    return out


def write_market_catalog(path, catalog: MarketCatalog) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_HEADER)
        for e in catalog.entries():
            w.writerow([e.id, e.zone, e.cpu, repr(float(e.mem)), repr(float(e.on_demand_price))])


def write_price_traces(path_or_file, traces: Mapping[str, PriceSeries]) -> None:
    """Write traces in timestamp-major order; floats use ``repr`` so they round-trip."""
    records = []
    for market in sorted(traces):
        s = traces[market]
        records.extend((int(t), market, float(p)) for t, p in zip(s.timestamps, s.prices))
    records.sort(key=lambda r: (r[0], r[1]))

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for t, m, p in records:
            w.writerow([t, m, repr(p)])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with Path(path_or_file).open("w", newline="", encoding="utf-8") as fh:
            emit(fh)


# --------------------------------------------------------------------------
# grids


def resample(series: PriceSeries, grid: Grid) -> np.ndarray:
    """Carry-forward resampling: tick value is the latest price at or before the tick."""
    idx = np.searchsorted(series.timestamps, grid.times, side="right") - 1
    if idx[0] < 0:
        raise NoPriorObservation(
            f"{series.market}: first sample at {series.timestamps[0]} is after grid start {grid.start}"
        )
    return series.prices[idx]


def align(traces: Mapping[str, PriceSeries], step_seconds: int = DEFAULT_STEP_SECONDS) -> UniformSeriesSet:
    """Resample every trace onto one grid covering the intersection of their spans."""
    if not traces:
        raise NoCommonWindow("no traces given")
    if step_seconds <= 0:
        raise InvalidSpec("step_seconds must be > 0")
    markets = tuple(sorted(traces))
    start = max(traces[m].span[0] for m in markets)
    stop = min(traces[m].span[1] for m in markets)
    if start > stop:
        raise NoCommonWindow(f"trace spans do not overlap (latest start {start} > earliest end {stop})")
    grid = Grid(start, step_seconds, (stop - start) // step_seconds + 1)
    return UniformSeriesSet(markets, grid, np.vstack([resample(traces[m], grid) for m in markets]))


def series_from_ticks(market: str, grid: Grid, values: np.ndarray) -> PriceSeries:
    """Compress a per-tick price vector to change points (plus the final tick to pin the span)."""
    values = np.asarray(values, dtype=float)
    keep = np.ones(values.size, dtype=bool)
    keep[1:] = values[1:] != values[:-1]
    keep[-1] = True
    return PriceSeries(market, grid.times[keep], values[keep])


# --------------------------------------------------------------------------
# synthetic scenarios

DISCOUNT_MODELS = ("fixed-fraction", "mean-reverting-with-spikes")
CORRELATION_MODELS = ("independent", "shared-spike-probability", "all-correlated")


@dataclass
class SyntheticScenarioSpec:
    """Parameters of a synthetic price scenario.

    Config-file keys are the field names; defaults are listed here.

    market_count
        Number of catalog markets to generate (first ``n`` in id order); all if unset.
    discount_model = fixed-fraction
        ``fixed-fraction``: constant ``discount_fraction * D``.
        ``mean-reverting-with-spikes``: price fraction follows a clipped
        mean-reverting walk around ``discount_fraction``.
    discount_fraction = 0.2
    volatility = 0.02
        Per-tick standard deviation of the price fraction (mean-reverting only).
    reversion = 0.1
        Per-tick pull toward ``discount_fraction`` (mean-reverting only).
    spike_rate = 0.0
        Spike onsets per hour per market.
    spike_dwell_ticks = 3
    spike_multiple = 10.0
        Spike price as a multiple of the on-demand price.
    correlation_model = independent
    rho = 0.0
        Coupling probability for ``shared-spike-probability``.
    black_swan_time
        Epoch second at which every market spikes simultaneously.
    start = 0
    step_seconds = 300
    seed = 0
    """

    market_count: int | None = None
    discount_model: str = "fixed-fraction"
    discount_fraction: float = 0.2
    volatility: float = 0.02
    reversion: float = 0.1
    spike_rate: float = 0.0
    spike_dwell_ticks: int = DEFAULT_SPIKE_DWELL_TICKS
    spike_multiple: float = SPIKE_MULTIPLE
    correlation_model: str = "independent"
    rho: float = 0.0
    black_swan_time: int | None = None
    start: int = 0
    step_seconds: int = DEFAULT_STEP_SECONDS
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.discount_model not in DISCOUNT_MODELS:
            raise InvalidSpec(f"discount_model must be one of {DISCOUNT_MODELS}")
        if self.correlation_model not in CORRELATION_MODELS:
            raise InvalidSpec(f"correlation_model must be one of {CORRELATION_MODELS}")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidSpec(f"rho must lie in [0, 1], got {self.rho}")
        if self.spike_rate < 0:
            raise InvalidSpec(f"spike_rate must be >= 0, got {self.spike_rate}")
        if not 0 < self.discount_fraction:
            raise InvalidSpec("discount_fraction must be > 0")
        if self.spike_dwell_ticks < 1:
            raise InvalidSpec("spike_dwell_ticks must be >= 1")
        if self.step_seconds <= 0:
            raise InvalidSpec("step_seconds must be > 0")
        if self.market_count is not None and self.market_count < 1:
            raise InvalidSpec("market_count must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SyntheticScenarioSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip()
            if key not in types:
                raise InvalidSpec(f"unknown synthetic scenario key {key!r}")
            raw = str(raw).strip()
            t = types[key]
            if raw.lower() in ("", "none") and "None" in t:
                kwargs[key] = None
            elif t.startswith("int"):
                kwargs[key] = int(raw)
            elif t.startswith("float"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "SyntheticScenarioSpec":
        return cls.from_mapping(read_key_values(path, "synthetic"))


def read_key_values(path, section: str) -> dict[str, str]:
    """Read ``key = value`` lines; a ``[section]`` header is optional."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = f"[{section}]\n{text}"
    parser.read_string(text, source=str(path))
    if not parser.has_section(section):
        raise InvalidSpec(f"{path}: missing [{section}] section")
    return dict(parser.items(section))


def generate_synthetic(
    spec: SyntheticScenarioSpec, catalog: MarketCatalog, duration: int
) -> dict[str, PriceSeries]:
    """Generate per-market price traces on a ``spec.step_seconds`` grid.

    The output is a pure function of ``(spec, catalog, duration)``; all
    randomness comes from ``numpy.random.default_rng(spec.seed)`` drawn in a
    fixed order.
    """
    spec.validate()
    if duration <= 0:
        raise InvalidSpec("duration must be > 0")
    markets = catalog.ids if spec.market_count is None else catalog.ids[: spec.market_count]
    if spec.market_count is not None and len(markets) < spec.market_count:
        raise InvalidSpec(f"catalog has {len(catalog)} markets, spec asks for {spec.market_count}")
    n = len(markets)
    count = max(1, duration // spec.step_seconds)
    grid = Grid(spec.start, spec.step_seconds, count)
    od = catalog.on_demand(markets)
    rng = np.random.default_rng(spec.seed)

    if spec.discount_model == "fixed-fraction":
        frac = np.full((n, count), spec.discount_fraction)
    else:
        noise = rng.standard_normal((n, count))
        frac = np.empty((n, count))
        frac[:, 0] = spec.discount_fraction
        for t in range(1, count):
            prev = frac[:, t - 1]
            frac[:, t] = prev + spec.reversion * (spec.discount_fraction - prev) + spec.volatility * noise[:, t]
            np.clip(frac[:, t], 0.02, 0.95, out=frac[:, t])
    prices = frac * od[:, None]

    onset = np.zeros((n, count), dtype=bool)
    if spec.spike_rate > 0:
        p = min(1.0, spec.spike_rate * spec.step_seconds / 3600.0)
        if spec.correlation_model == "all-correlated":
            common = rng.random(count) < p
            onset[:] = common[None, :]
        else:
            primary = rng.random((n, count)) < p
            coupled = rng.random((n, count)) < spec.rho
            onset = primary.copy()
            if spec.correlation_model == "shared-spike-probability":
                broadcast = np.any(primary & coupled, axis=0)
                onset |= broadcast[None, :]
    if spec.black_swan_time is not None:
        k = (spec.black_swan_time - spec.start) // spec.step_seconds
        if 0 <= k < count:
            onset[:, k] = True

    spiking = np.zeros_like(onset)
    for d in range(spec.spike_dwell_ticks):
        spiking[:, d:] |= onset[:, : count - d]
    prices = np.where(spiking, spec.spike_multiple * od[:, None], prices)
    return {m: series_from_ticks(m, grid, prices[i]) for i, m in enumerate(markets)}


def inject_spike(
    series: PriceSeries,
    at: int,
    dwell_seconds: int,
    on_demand: float,
    multiple: float = SPIKE_MULTIPLE,
) -> PriceSeries:
    """Return ``series`` with its price forced to ``multiple * on_demand`` on ``[at, at + dwell)``."""
    ts, px = series.timestamps, series.prices
    first, last = series.span
    if not first <= at <= last:
        raise InvalidSpec(f"spike time {at} outside trace span [{first}, {last}]")
    end = at + dwell_seconds
    spike = multiple * on_demand
    points = {int(t): float(p) for t, p in zip(ts, px) if t < at or t >= end}
    if end <= last and end not in points:
        points[end] = float(px[np.searchsorted(ts, end, side="right") - 1])
    points[at] = spike
    if end > last:
        points[last] = spike
    times = sorted(points)
    return PriceSeries(series.market, np.array(times, dtype=np.int64), np.array([points[t] for t in times]))


def synthetic_catalog(n: int, seed: int = 0, zones: int = 4) -> MarketCatalog:
    """A catalog of ``n`` markets with varied sizes, for demos and tests."""
    rng = np.random.default_rng(seed)
    sizes = [(1, 3.75), (2, 7.5), (4, 15.0), (8, 30.0), (16, 61.0)]
    entries = []
    for i in range(n):
        cpu, mem = sizes[int(rng.integers(len(sizes)))]
        price = round(0.07 * cpu * float(rng.uniform(0.8, 1.3)), 4)
        zone = "us-east-1" + "abcdefgh"[i % zones]
        entries.append(MarketCatalogEntry(f"{zone}/m{i:04d}", zone, cpu, mem, price))
    return MarketCatalog(entries)
