"""Simulation results and their JSON / CSV renderings."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

SUMMARY_COLUMNS = (
    "app", "kind", "arrival", "completion_time", "baseline_time", "runtime_increase_fraction",
    "transient_cost", "on_demand_cost_baseline", "savings_fraction", "revocation_count",
    "checkpoints_written", "rollback_work_lost_seconds", "checkpoint_interval_seconds",
)


@dataclass
class AppResult:
    app: str
    kind: str
    arrival: float
    finish_time: float
    completion_time: float
    baseline_time: float
    runtime_increase_fraction: float
    transient_cost: float
    on_demand_cost_baseline: float
    savings_fraction: float
    revocation_count: int
    checkpoints_written: int
    rollback_work_lost_seconds: float
    checkpoint_interval_seconds: float | None
    portfolio: dict = field(default_factory=dict)
    checkpoint_times: list = field(default_factory=list)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class SimReport:
    apps: dict
    cluster: dict
    scenario: dict = field(default_factory=dict)
    events: list | None = None
    billing: list | None = None

    def __getitem__(self, app_id) -> AppResult:
        return self.apps[app_id]

    def to_dict(self, include_events: bool = False) -> dict:
        out = {
            "scenario": self.scenario,
            "apps": {k: asdict(v) for k, v in sorted(self.apps.items())},
            "cluster": self.cluster,
        }
        if include_events:
            out["events"] = self.events or []
            out["billing"] = self.billing or []
        return out

    def to_json(self, include_events: bool = False) -> str:
        return json.dumps(self.to_dict(include_events), sort_keys=True, indent=2) + "\n"

    def summary_rows(self) -> list[dict]:
        return [{c: getattr(r, c) for c in SUMMARY_COLUMNS} for _, r in sorted(self.apps.items())]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in self.summary_rows():
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
        return buf.getvalue()
