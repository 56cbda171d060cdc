"""Policy grids, failure injection, and the black-swan run."""
from __future__ import annotations

import configparser
import csv
import io
import itertools
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ..errors import InvalidSpec
from ..market_data import SPIKE_MULTIPLE, UniformSeriesSet
from .engine import run
from .scenario import ApplicationSpec, Scenario, _opt_float, _parse_weights, load_scenario

GRID_COLUMNS = (
    "completion_time", "baseline_time", "runtime_increase_fraction", "transient_cost",
    "savings_fraction", "revocation_count", "checkpoints_written", "rollback_work_lost_seconds",
)

_APP_FIELDS = {
    "alpha": float,
    "checkpoint_seconds": _opt_float,
    "recovery": str,
    "progress_threshold": float,
    "price_threshold": _opt_float,
    "work_seconds": float,
    "weights": _parse_weights,
    "task_seconds": _opt_float,
    "slots": int,
    "kind": str,
}
_SCENARIO_FIELDS = {
    "sharing_mode": str,
    "warning_seconds": float,
    "replenish_latency": float,
    "soft_warning_fraction": float,
    "cov_kind": str,
}


def with_spike(
    scenario: Scenario,
    markets: Iterable[str],
    at: float,
    dwell_seconds: float,
    multiple: float = SPIKE_MULTIPLE,
) -> Scenario:
    """Force the price of ``markets`` to ``multiple`` x on-demand on ``[at, at + dwell)``."""
    p = scenario.prices
    g = p.grid
    times = g.times
    hit = (times >= at) & (times < at + dwell_seconds)
    if not hit.any():
        raise InvalidSpec(f"spike window [{at}, {at + dwell_seconds}) covers no tick")
    values = p.values.copy()
    for m in markets:
        i = p.index(m)
        values[i, hit] = multiple * scenario.catalog[m].on_demand_price
    return scenario.evolve(prices=UniformSeriesSet(p.markets, g, values))


def black_swan(scenario: Scenario, at: float | None = None, dwell_seconds: float | None = None):
    """Run with every market spiking at once.

    Without ``at`` the scenario's traces must already carry the event
    (``black_swan_time`` of the synthetic generator).
    """
    if at is not None:
        dwell = dwell_seconds if dwell_seconds is not None else 3 * scenario.tick_seconds
        scenario = with_spike(scenario, scenario.prices.markets, at, dwell).evolve(black_swan_time=float(at))
    elif scenario.black_swan_time is None:
        raise InvalidSpec("black_swan needs a spike time or traces generated with black_swan_time")
    return run(scenario)


def _split(raw: str) -> list[str]:
    sep = "|" if "|" in raw else ","
    return [v.strip() for v in raw.split(sep) if v.strip()]


def policy_cells(base: Scenario, app_id: str, axes: Mapping[str, Sequence]) -> list:
    """Cartesian product of ``axes``; each key is an app field or a scenario option."""
    apps = {a.id: a for a in base.applications}
    if app_id not in apps:
        raise InvalidSpec(f"no application {app_id!r} in the scenario")
    for key in axes:
        if key not in _APP_FIELDS and key not in _SCENARIO_FIELDS:
            raise InvalidSpec(f"cannot vary {key!r}")
    keys = list(axes)
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        label = dict(zip(keys, combo))
        app_kw = {k: v for k, v in label.items() if k in _APP_FIELDS}
        scen_kw = {k: v for k, v in label.items() if k in _SCENARIO_FIELDS}
        app = replace(apps[app_id], **app_kw)
        others = [a for a in base.applications if a.id != app_id]
        cells.append((label, base.with_apps(others + [app]).evolve(**scen_kw)))
    return cells


def compare_policies(cells: Sequence, app_id: str) -> list[dict]:
    """Run every ``(label, scenario)`` cell; one row per cell in the given order."""
    rows = []
    for label, scenario in cells:
        r = run(scenario)[app_id]
        rows.append({**{k: _label(v) for k, v in label.items()}, **{c: getattr(r, c) for c in GRID_COLUMNS}})
    return rows


def _label(v):
    if isinstance(v, Mapping):
        return ";".join(f"{m}:{w!r}" for m, w in sorted(v.items()))
    return "none" if v is None else v


def rows_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = list(rows[0])
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return buf.getvalue()


def load_matrix(path) -> tuple:
    """Parse a policy-matrix file into ``(cells, app_id)``.

    ::

        [matrix]
        scenario = scenario.ini
        app = kmeans
        recovery = eager, none
        checkpoint_seconds = 120, none
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    if not parser.has_section("matrix"):
        raise InvalidSpec(f"{path}: missing [matrix] section")
    spec = dict(parser.items("matrix"))
    try:
        scen_path = Path(spec.pop("scenario"))
        app_id = spec.pop("app")
    except KeyError as exc:
        raise InvalidSpec(f"{path}: missing key {exc.args[0]}") from None
    if not scen_path.is_absolute():
        scen_path = path.parent / scen_path
    base = load_scenario(scen_path)
    axes = {}
    for key, raw in spec.items():
        conv = _APP_FIELDS.get(key) or _SCENARIO_FIELDS.get(key)
        if conv is None:
            raise InvalidSpec(f"{path}: cannot vary {key!r}")
        try:
            axes[key] = [conv(v) for v in _split(raw)]
        except ValueError as exc:
            raise InvalidSpec(f"{path}: {key}: {exc}") from None
    return policy_cells(base, app_id, axes), app_id


def diversity_portfolios(markets: Sequence[str], tiers: Mapping[str, int]) -> dict:
    """Equal-weight portfolios over the first ``k`` markets for each tier."""
    out = {}
    for name, k in tiers.items():
        if not 1 <= k <= len(markets):
            raise InvalidSpec(f"tier {name} needs {k} markets, have {len(markets)}")
        out[name] = {m: 1.0 / k for m in markets[:k]}
    return out


DIVERSITY_TIERS = {"low": 1, "medium": 3, "high": 5}


def diversity_sweep(
    base: Scenario, app: ApplicationSpec, markets: Sequence[str], tiers: Mapping[str, int] = DIVERSITY_TIERS
) -> dict:
    """Runtime increase of ``app`` for each diversity tier; ``markets[0]`` should be the one that fails."""
    out = {}
    for name, weights in diversity_portfolios(markets, tiers).items():
        spec = replace(app, weights=weights)
        out[name] = run(base.with_apps([spec]))[app.id].runtime_increase_fraction
    return out


__all__ = [
    "with_spike", "black_swan", "policy_cells", "compare_policies", "rows_csv", "load_matrix",
    "diversity_portfolios", "diversity_sweep", "DIVERSITY_TIERS", "GRID_COLUMNS",
]
