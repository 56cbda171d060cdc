"""Expected returns, covariance constructions, MTTR estimates and PSD repair.

Price and hybrid covariances are computed on prices normalised by each
market's on-demand price, so a market of any size contributes risk in the
same units and the hybrid revocation penalty is a uniform 10.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptySeries,
    InvalidSpec,
    LengthMismatch,
    NonPositiveValue,
    NonSymmetricInput,
    TooShort,
    UnknownMarket,
)
from .market_data import SPIKE_MULTIPLE, MarketCatalog, UniformSeriesSet

KINDS = ("price", "revocation", "hybrid", "synthetic")
SIMULTANEITY_WINDOW_SECONDS = 300
PSD_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class ReturnsVector:
    markets: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.markets),):
            raise LengthMismatch("returns vector length does not match market list")
        object.__setattr__(self, "markets", tuple(self.markets))
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.markets)

    def __getitem__(self, market):
        return float(self.values[self.markets.index(market)])

    def subset(self, markets) -> "ReturnsVector":
        markets = tuple(markets)
        return ReturnsVector(markets, np.array([self[m] for m in markets]))


@dataclass(eq=False)
class CovarianceMatrix:
    markets: tuple[str, ...]
    kind: str
    entries: np.ndarray
    repaired: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"covariance kind must be one of {KINDS}, got {self.kind!r}")
        self.markets = tuple(self.markets)
        self.entries = np.asarray(self.entries, dtype=float)
        n = len(self.markets)
        if self.entries.shape != (n, n):
            raise LengthMismatch(f"matrix shape {self.entries.shape} does not match {n} markets")

    def __len__(self):
        return len(self.markets)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])

    def subset(self, markets) -> "CovarianceMatrix":
        markets = tuple(markets)
        idx = [self.markets.index(m) for m in markets]
        return CovarianceMatrix(markets, self.kind, self.entries[np.ix_(idx, idx)], self.repaired)


@dataclass(frozen=True)
class BidPolicy:
    """Per-market bid prices; by default each market bids its on-demand price."""

    bids: Mapping[str, float]

    def __post_init__(self):
        for m, b in self.bids.items():
            if not b > 0:
                raise NonPositiveValue(f"bid for {m} must be > 0, got {b}")

    @classmethod
    def on_demand(cls, catalog: MarketCatalog, multiple: float = 1.0) -> "BidPolicy":
        if not multiple > 0:
            raise NonPositiveValue(f"bid multiple must be > 0, got {multiple}")
        return cls({m: multiple * catalog[m].on_demand_price for m in catalog})

    def __getitem__(self, market) -> float:
        try:
            return self.bids[market]
        except KeyError:
            raise UnknownMarket(f"no bid defined for market {market!r}") from None

    def vector(self, markets) -> np.ndarray:
        return np.array([self[m] for m in markets], dtype=float)


@dataclass(frozen=True)
class MttrEstimate:
    market: str
    mttr_seconds: float
    revocation_count: int
    censored: bool


# --------------------------------------------------------------------------
# returns


def expected_return(series, on_demand: float) -> float:
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise EmptySeries("cannot compute the return of an empty series")
    if not on_demand > 0:
        raise NonPositiveValue(f"on-demand price must be > 0, got {on_demand}")
    return 1.0 - float(np.mean(series)) / on_demand


def returns_vector(aligned: UniformSeriesSet, catalog: MarketCatalog) -> ReturnsVector:
    return ReturnsVector(
        aligned.markets,
        [expected_return(aligned.values[i], catalog[m].on_demand_price) for i, m in enumerate(aligned.markets)],
    )


# --------------------------------------------------------------------------
# pairwise statistics


def price_covariance(x, y) -> float:
    """Population covariance with 1/T normalisation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise TooShort("covariance needs at least 2 samples")
    return float(np.sum((x - x.mean()) * (y - y.mean())) / x.size)


def revocation_events(series, bid: float) -> np.ndarray:
    """Tick indices where the price crosses from at-or-below ``bid`` to above it."""
    if not bid > 0:
        raise NonPositiveValue(f"bid must be > 0, got {bid}")
    above = np.asarray(series, dtype=float) > bid
    return np.flatnonzero(above[1:] & ~above[:-1]) + 1


def _matched_pairs(ex: np.ndarray, ey: np.ndarray, window: int) -> int:
    # Greedy two-pointer matching is a maximum matching for |tx - ty| <= window
    # on a line, so the count does not depend on argument order.
    i = j = matched = 0
    while i < ex.size and j < ey.size:
        d = int(ex[i]) - int(ey[j])
        if abs(d) <= window:
            matched += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return matched


def simultaneity_from_events(ex, ey, window_ticks: int = 0) -> float:
    ex = np.asarray(ex, dtype=np.int64)
    ey = np.asarray(ey, dtype=np.int64)
    matched = _matched_pairs(ex, ey, window_ticks)
    union = ex.size + ey.size - matched
    return matched / union if union else 0.0


def simultaneous_revocation_probability(x, y, bids: Sequence[float], window_ticks: int = 0) -> float:
    """Matched revocations over the union of revocations of two markets.

    ``bids`` is ``(bid_x, bid_y)``. A revocation of X is matched when an
    unmatched revocation of Y lies within ``window_ticks`` ticks of it.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"series lengths differ: {x.size} vs {y.size}")
    if window_ticks < 0:
        raise InvalidSpec("window_ticks must be >= 0")
    bx, by = bids
    return simultaneity_from_events(revocation_events(x, bx), revocation_events(y, by), window_ticks)


def window_ticks_for(step_seconds: int, window_seconds: int = SIMULTANEITY_WINDOW_SECONDS) -> int:
    """Largest tick offset whose time difference stays strictly inside the window."""
    return max(0, math.ceil(window_seconds / step_seconds) - 1)


def hybrid_transform(series, bid: float, on_demand: float) -> np.ndarray:
    """Replace every at-or-above-bid price with the revocation penalty ``10 * D``."""
    if not bid > 0 or not on_demand > 0:
        raise NonPositiveValue("bid and on-demand price must be > 0")
    s = np.asarray(series, dtype=float)
    return np.where(s < bid, s, SPIKE_MULTIPLE * on_demand)


# --------------------------------------------------------------------------
# matrices


def _population_cov(z: np.ndarray) -> np.ndarray:
    dev = z - z.mean(axis=1, keepdims=True)
    v = dev @ dev.T / z.shape[1]
    return (v + v.T) / 2


def covariance_matrix(
    aligned: UniformSeriesSet,
    catalog: MarketCatalog,
    bids: BidPolicy | None = None,
    kind: str = "price",
    window_seconds: int = SIMULTANEITY_WINDOW_SECONDS,
    repair: bool = True,
) -> CovarianceMatrix:
    """Build the covariance matrix of ``kind`` over the markets of ``aligned``.

    ``price`` and ``hybrid`` are 1/T covariances of normalised prices (the
    latter after the revocation penalty transform). ``revocation`` holds the
    pairwise simultaneous-revocation probability, with a market's
    self-simultaneity (1, or 0 when it never revokes) on the diagonal.
    Any result with an eigenvalue below ``-1e-8`` is repaired unless
    ``repair`` is false.
    """
    if kind not in ("price", "revocation", "hybrid"):
        raise InvalidSpec(f"cannot build a {kind!r} matrix from traces")
    markets = aligned.markets
    if len(markets) < 2:
        raise InvalidSpec("a covariance matrix needs at least 2 markets")
    if aligned.grid.count < 2:
        raise TooShort("covariance needs at least 2 ticks")
    od = catalog.on_demand(markets)
    if kind != "price" and bids is None:
        raise InvalidSpec(f"kind={kind} needs bid prices")

    if kind == "price":
        v = _population_cov(aligned.values / od[:, None])
    elif kind == "hybrid":
        b = bids.vector(markets)
        z = np.vstack([hybrid_transform(aligned.values[i], b[i], od[i]) for i in range(len(markets))])
        v = _population_cov(z / od[:, None])
    else:
        b = bids.vector(markets)
        window = window_ticks_for(aligned.grid.step, window_seconds)
        events = [revocation_events(aligned.values[i], b[i]) for i in range(len(markets))]
        v = revocation_matrix(events, aligned.grid.count, window)
    cov = CovarianceMatrix(markets, kind, v)
    if repair and cov.min_eigenvalue() < -PSD_TOLERANCE:
        cov = psd_repair(cov)
    return cov


def revocation_matrix(events: Sequence[np.ndarray], count: int, window_ticks: int) -> np.ndarray:
    n = len(events)
    if window_ticks == 0:
        hits = np.zeros((n, count))
        for i, e in enumerate(events):
            hits[i, e] = 1.0
        inter = hits @ hits.T
        sizes = np.diag(inter)
        union = sizes[:, None] + sizes[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        return v
    v = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            v[i, j] = v[j, i] = simultaneity_from_events(events[i], events[j], window_ticks)
    return v


def psd_repair(matrix: CovarianceMatrix) -> CovarianceMatrix:
    """Clip negative eigenvalues to zero; a no-op when the matrix is already PSD."""
    a = matrix.entries
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > SYMMETRY_TOLERANCE * scale:
        raise NonSymmetricInput("matrix is not symmetric")
    w, q = np.linalg.eigh(a)
    if w.size == 0 or w[0] >= -PSD_TOLERANCE:
        return replace(matrix, repaired=False) if matrix.repaired else matrix
    fixed = (q * np.clip(w, 0.0, None)) @ q.T
    fixed = (fixed + fixed.T) / 2
    return CovarianceMatrix(matrix.markets, matrix.kind, fixed, repaired=True)


def synthetic_correlated_matrix(
    markets: Sequence[str],
    seed: int,
    low: float = 0.7,
    high: float = 1.0,
    variance: tuple[float, float] = (0.01, 0.05),
) -> CovarianceMatrix:
    """A highly correlated covariance with no near-independent market pairs.

    One-factor construction: correlation ``l_i * l_j`` off the diagonal with
    loadings drawn from ``[low, high]``, so every pairwise correlation is at
    least ``low**2`` and the matrix is PSD by construction.
    """
    rng = np.random.default_rng(seed)
    n = len(markets)
    loading = rng.uniform(low, high, n)
    corr = np.outer(loading, loading)
    np.fill_diagonal(corr, 1.0)
    sd = np.sqrt(rng.uniform(*variance, n))
    v = corr * np.outer(sd, sd)
    return CovarianceMatrix(tuple(markets), "synthetic", (v + v.T) / 2)


# --------------------------------------------------------------------------
# MTTR


def mttr_from_events(market: str, event_count: int, span_seconds: float) -> MttrEstimate:
    if event_count < 0:
        raise InvalidSpec("event count must be >= 0")
    if not span_seconds > 0:
        raise InvalidSpec("observed span must be > 0")
    if event_count == 0:
        return MttrEstimate(market, float(span_seconds), 0, True)
    return MttrEstimate(market, span_seconds / event_count, event_count, False)


def mttr(series, bid: float, step_seconds: float, market: str = "") -> MttrEstimate:
    """Observed span over revocation count; censored at the span when nothing revoked.

    A uniform series of T ticks observes ``T * step_seconds`` seconds.
    """
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise EmptySeries("cannot estimate MTTR from an empty series")
    return mttr_from_events(market, int(revocation_events(series, bid).size), series.size * step_seconds)


def mttr_table(aligned: UniformSeriesSet, bids: BidPolicy) -> dict[str, MttrEstimate]:
    return {
        m: mttr(aligned.values[i], bids[m], aligned.grid.step, market=m)
        for i, m in enumerate(aligned.markets)
    }
