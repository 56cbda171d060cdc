"""Discrete-event replay of price traces against a set of applications.

Events are processed in ``(time, priority, sequence)`` order. At equal
timestamps prices update first, then revocations, then warnings and
threshold crossings, then application-side work (replenishment arrivals,
checkpoints, MTTR refreshes, arrivals, completions). Between two events
every application progresses at a constant rate, so the loop jumps
straight from one event to the next.
"""
from __future__ import annotations

import heapq
import itertools
import math

import numpy as np

from ..allocator import (
    EPS,
    REVOKED,
    RUNNING,
    TERMINATED,
    WARNED,
    ZERO,
    ClusterState,
    allocate_private,
    allocate_shared,
    allocation_weights,
    release,
    release_market,
    servers_per_market,
    top_up,
)
from ..errors import TraceHorizonExceeded
from ..optimizer import PortfolioProblem, filter_markets, solve
from ..risk import covariance_matrix, mttr_table, returns_vector
from .apps import make_app
from .report import AppResult, SimReport
from .scenario import Scenario

PRICE_TICK, REVOCATION, HARD_WARNING, SOFT_WARNING, PRICE_THRESHOLD = 0, 1, 2, 3, 4
REPLENISH, INTERNAL, MTTR_REFRESH, ARRIVAL = 5, 6, 7, 8
EVENT_NAMES = {
    PRICE_TICK: "PriceTick", REVOCATION: "Revocation", HARD_WARNING: "HardRevocationWarning",
    SOFT_WARNING: "SoftRevocationWarning", PRICE_THRESHOLD: "PriceThresholdCrossed",
    REPLENISH: "ReplenishComplete", INTERNAL: "AppInternal", MTTR_REFRESH: "MttrRefresh",
    ARRIVAL: "AppArrival",
}


class Simulator:
    """One run of a :class:`Scenario`. Use :func:`run` unless you need the internals."""

    def __init__(self, scenario: Scenario, record_events: bool = False):
        self.scenario = scenario
        self.record = record_events
        self.cluster = ClusterState(scenario.catalog, scenario.hold_seconds)
        p = scenario.prices
        self._idx = {m: i for i, m in enumerate(p.markets)}
        self._values = p.values
        self._start = float(p.grid.start)
        self._step = float(p.grid.step)
        self._count = p.grid.count
        self._bids = np.array([scenario.bids[m] for m in p.markets])
        n = len(p.markets)
        self._cum = np.hstack([np.zeros((n, 1)), np.cumsum(self._values * self._step, axis=1)])
        self.now = self._start
        self.apps: dict = {}
        self.active: dict = {}
        self.pending_revocation: dict = {}  # market -> revocation time
        self.warned_at: dict = {}  # server id -> hard-warning time
        self.pending_replenish: set = set()
        self.revocation_log: list = []
        self.events: list = []
        self._threshold_state: dict = {}
        self._heap: list = []
        self._seq = itertools.count()
        self._arrivals_left = 0
        self._stats = None

    # -- prices -----------------------------------------------------------

    def _tick(self, t: float) -> int:
        k = int(math.floor((t - self._start) / self._step + 1e-9))
        return min(max(k, 0), self._count - 1)

    def price(self, market: str, t: float | None = None) -> float:
        return float(self._values[self._idx[market], self._tick(self.now if t is None else t)])

    def price_integral(self, market: str, t0: float, t1: float) -> float:
        """Integral of the piecewise-constant price over ``[t0, t1]``, in price-seconds."""
        i = self._idx[market]

        def F(t):
            x = (t - self._start) / self._step
            k = min(max(int(math.floor(x + 1e-12)), 0), self._count - 1)
            return self._cum[i, k] + self._values[i, k] * (t - (self._start + k * self._step))

        return float(F(t1) - F(t0))

    def available(self, market: str) -> bool:
        i = self._idx[market]
        return market not in self.pending_revocation and self._values[i, self._tick(self.now)] <= self._bids[i]

    # -- statistics used to pick portfolios --------------------------------

    def stats(self):
        if self._stats is None:
            s = self.scenario
            ret = returns_vector(s.prices, s.catalog)
            cov = covariance_matrix(s.prices, s.catalog, s.bids, s.cov_kind) if len(s.prices.markets) > 1 else None
            self._stats = (ret, cov, mttr_table(s.prices, s.bids))
        return self._stats

    def choose_portfolio(self, spec) -> dict:
        if spec.weights is not None:
            return dict(spec.weights)
        ret, cov, mttr = self.stats()
        constraints = spec.constraints
        alpha = spec.alpha
        if spec.kind == "rigid":
            alpha = 0.0
            if constraints.required_mttr is None:
                constraints = type(constraints)(**{**constraints.__dict__, "job_length_seconds": spec.work_seconds})
        candidates = filter_markets(self.scenario.catalog, mttr, constraints, ret)
        if len(candidates) == 1:
            return {candidates[0]: 1.0}
        problem = PortfolioProblem.from_stats(ret.subset(candidates), cov.subset(candidates), alpha)
        return allocation_weights(solve(problem))

    def portfolio_mttr(self, weights: dict) -> float:
        table = self.stats()[2]
        total = sum(weights.values())
        return sum(w * table[m].mttr_seconds for m, w in weights.items()) / total

    # -- services offered to application models ---------------------------

    def _usable(self, server, include_pending):
        if server.state not in (RUNNING, WARNED):
            return False
        return include_pending or server.ready_at <= self.now + EPS

    def usable_fraction(self, app_id, market=None, weights=None, include_pending=False) -> float:
        rec = self.cluster.apps.get(app_id)
        if rec is None:
            return 0.0
        total = ZERO
        for s in self.cluster.app_servers(app_id, market):
            if self._usable(s, include_pending):
                total = total + s.allocations[app_id]
        need = rec.r if market is None else rec.r.scale((weights or rec.weights).get(market, 0.0))
        ratios = [h / n for h, n in ((total.cpu, need.cpu), (total.mem, need.mem)) if n > EPS]
        if not ratios:
            return 0.0
        return min(1.0, min(ratios))

    def _ready_events(self, app_id, plan):
        times = set()
        for mp in plan.markets.values():
            for sid, _ in mp.containers:
                times.add(max(self.now, self.cluster.servers[sid].ready_at))
        for t in sorted(times):
            self._push(t, REPLENISH, app_id)

    def _place(self, app_id, weights, ready_at, markets=None):
        app = self.apps[app_id]
        s = self.scenario
        if app_id not in self.cluster.apps:
            alloc = allocate_shared if s.sharing_mode == "shared" else allocate_private
            kw = {"first_fit": s.first_fit} if s.sharing_mode == "shared" else {}
            plan = alloc(app_id, weights, app.spec.r, s.catalog, self.cluster, self.now, ready_at, **kw)
        else:
            plan = top_up(app_id, weights, self.cluster, self.now, ready_at, first_fit=s.first_fit, markets=markets)
        self._ready_events(app_id, plan)
        self._log("Allocate", app=app_id, servers=plan.server_counts(), new=plan.n_new)
        return plan

    def replenish(self, app_id, initial=False):
        """Restore the app to full size over its currently available portfolio markets."""
        app = self.apps[app_id]
        avail = {m: w for m, w in app.base_weights.items() if self.available(m)}
        if not avail:
            self.pending_replenish.add(app_id)
            return
        self.pending_replenish.discard(app_id)
        total = sum(avail.values())
        weights = {m: w / total for m, w in sorted(avail.items())}
        app.weights = weights
        ready_at = self.now if initial else self.now + self.scenario.replenish_latency
        self._place(app_id, weights, ready_at)

    def release_market(self, app_id, market):
        release_market(app_id, market, self.cluster, self.now)

    def acquire_market(self, app_id, market):
        app = self.apps[app_id]
        if not self.available(market):
            return
        self._place(app_id, app.weights, self.now + self.scenario.replenish_latency, markets=[market])

    # -- event plumbing ---------------------------------------------------

    def _push(self, t, prio, payload=None):
        heapq.heappush(self._heap, (float(t), prio, next(self._seq), payload))

    def _log(self, kind, **detail):
        if self.record:
            self.events.append({"time": self.now, "event": kind, **detail})

    def _affected_apps(self, market, states=(RUNNING, WARNED)):
        apps = set()
        for s in self.cluster.servers.values():
            if s.market == market and s.state in states:
                apps.update(s.allocations)
        return sorted(a for a in apps if a in self.active)

    def _on_price_tick(self, k):
        now = self.now
        s = self.scenario
        cur = self._values[:, k]
        prev = self._values[:, k - 1] if k > 0 else None
        markets = s.prices.markets
        for i, m in enumerate(markets):
            bid = self._bids[i]
            if prev is None:
                continue
            if prev[i] <= bid < cur[i]:
                t_rev = now + s.warning_seconds
                if m not in self.pending_revocation:
                    self.pending_revocation[m] = t_rev
                    self._push(now, HARD_WARNING, (m, t_rev))
                    self._push(t_rev, REVOCATION, m)
            soft = s.soft_warning_fraction * bid
            if cur[i] <= bid and cur[i] >= soft and prev[i] < soft:
                self._push(now, SOFT_WARNING, m)
        for app_id in sorted(self.active):
            app = self.active[app_id]
            theta = app.spec.price_threshold
            if theta is None:
                continue
            for m in sorted(app.base_weights):
                above = self.price(m) > theta * self.scenario.catalog[m].on_demand_price
                key = (app_id, m)
                if self._threshold_state.get(key, False) != above:
                    self._threshold_state[key] = above
                    self._push(now, PRICE_THRESHOLD, (app_id, m, above))
        if k + 1 < self._count:
            self._push(self._start + (k + 1) * self._step, PRICE_TICK, k + 1)

    def _retry_replenish(self):
        for app_id in sorted(self.pending_replenish):
            if app_id in self.active:
                self.replenish(app_id, initial=app_id not in self.cluster.apps)
            else:
                self.pending_replenish.discard(app_id)

    def _on_hard_warning(self, market, t_rev):
        affected = self._affected_apps(market, (RUNNING,))
        n = 0
        for s in sorted(self.cluster.servers.values(), key=lambda s: s.id):
            if s.market == market and s.state == RUNNING:
                self.cluster.set_state(s, WARNED, self.now)
                self.warned_at[s.id] = self.now
                n += 1
        self._log("HardRevocationWarning", market=market, revoke_at=t_rev, servers=n)
        for app_id in affected:
            self.active[app_id].on_hard_warning(self, market, t_rev)

    def _on_soft_warning(self, market):
        self._log("SoftRevocationWarning", market=market)
        for app_id in self._affected_apps(market, (RUNNING,)):
            self.active[app_id].on_soft_warning(self, market)

    def _on_revocation(self, market):
        warned = self.now - self.scenario.warning_seconds
        victims = sorted(
            (s for s in self.cluster.servers.values() if s.market == market and s.state in (RUNNING, WARNED)),
            key=lambda s: s.id,
        )
        lost, held = {}, {}
        for s in self.cluster.servers.values():
            if s.state in (RUNNING, WARNED):
                for a, v in s.allocations.items():
                    held[a] = held.get(a, ZERO) + v
        for s in victims:
            for a, v in s.allocations.items():
                lost[a] = lost.get(a, ZERO) + v
        for s in victims:
            if s.state == RUNNING:
                self.cluster.set_state(s, WARNED, self.now)
                self.warned_at.setdefault(s.id, self.now)
            self.cluster.set_state(s, REVOKED, self.now)
        for s in self.cluster.free_list.candidates(market):
            self.cluster.free_list.take(s.id)
            self.cluster.set_state(s, TERMINATED, self.now)
        self.pending_revocation.pop(market, None)
        self.revocation_log.append(
            {"market": market, "warned_at": warned, "revoked_at": self.now, "servers": len(victims)}
        )
        self._log("Revocation", market=market, servers=len(victims))
        for app_id in sorted(lost):
            if app_id not in self.active:
                continue
            app = self.active[app_id]
            r = app.spec.r
            if r.cpu > EPS:
                f = lost[app_id].cpu / held[app_id].cpu if held[app_id].cpu > EPS else 1.0
            else:
                f = lost[app_id].mem / held[app_id].mem if held[app_id].mem > EPS else 1.0
            app.on_revocation(self, market, min(1.0, f))

    def _on_arrival(self, spec):
        self._arrivals_left -= 1
        weights = self.choose_portfolio(spec)
        app = make_app(spec, weights, self.now)
        self.apps[spec.id] = app
        self.active[spec.id] = app
        self._log("AppArrival", app=spec.id, portfolio=weights)
        self.replenish(spec.id, initial=True)
        if spec.price_threshold is not None:
            for m in sorted(weights):
                above = self.price(m) > spec.price_threshold * self.scenario.catalog[m].on_demand_price
                self._threshold_state[(spec.id, m)] = above
                if above:
                    self._push(self.now, PRICE_THRESHOLD, (spec.id, m, True))
        app.on_mttr(self, self.portfolio_mttr(app.weights))
        if spec.kind == "bag-of-tasks":
            app.on_ready(self)

    def _on_done(self, app):
        release(app.id, self.cluster, self.now)
        del self.active[app.id]
        self.pending_replenish.discard(app.id)
        self._log("AppDone", app=app.id)

    def _next_internal(self):
        best, who = math.inf, None
        for app_id in sorted(self.active):
            t = self.active[app_id].next_internal(self.now)
            if t < best:
                best, who = t, app_id
        return best, who

    # -- main loop --------------------------------------------------------

    def run(self) -> SimReport:
        s = self.scenario
        for spec in sorted(s.applications, key=lambda a: (a.arrival, a.id)):
            self._push(self._start + spec.arrival, ARRIVAL, spec)
            self._arrivals_left += 1
        self._push(self._start, PRICE_TICK, 0)
        self._push(self._start + s.mttr_refresh_seconds, MTTR_REFRESH)
        horizon = s.horizon
        while self.active or self._arrivals_left:
            t_int, who = self._next_internal()
            top = self._heap[0] if self._heap else (math.inf, 99)
            internal = (t_int, INTERNAL) < (top[0], top[1])
            t = t_int if internal else top[0]
            if t > horizon + EPS:
                late = sorted(self.active) or ["pending arrivals"]
                raise TraceHorizonExceeded(
                    f"{', '.join(late)} still running at the end of the price trace (t={horizon:g})"
                )
            dt = t - self.now
            for app in self.active.values():
                app.advance(dt)
            self.now = t
            self.cluster.expire_free_list(self.now)
            if internal:
                app = self.active[who]
                app.on_internal(self)
                if app.done:
                    self._on_done(app)
            else:
                _, prio, _, payload = heapq.heappop(self._heap)
                self._dispatch(prio, payload)
            for app in self.active.values():
                app.rate = app.compute_rate(self)
        return self._finalise()

    def _dispatch(self, prio, payload):
        if prio == PRICE_TICK:
            self._on_price_tick(payload)
            self._retry_replenish()
        elif prio == REVOCATION:
            self._on_revocation(payload)
        elif prio == HARD_WARNING:
            self._on_hard_warning(*payload)
        elif prio == SOFT_WARNING:
            self._on_soft_warning(payload)
        elif prio == PRICE_THRESHOLD:
            app_id, m, above = payload
            if app_id in self.active:
                self._log("PriceThresholdCrossed", app=app_id, market=m, above=above)
                self.active[app_id].on_price_threshold(self, m, above)
        elif prio == REPLENISH:
            if payload in self.active:
                self._log("ReplenishComplete", app=payload)
                self.active[payload].on_ready(self)
        elif prio == MTTR_REFRESH:
            for app_id in sorted(self.active):
                app = self.active[app_id]
                app.on_mttr(self, self.portfolio_mttr(app.weights))
            self._push(self.now + self.scenario.mttr_refresh_seconds, MTTR_REFRESH)
        elif prio == ARRIVAL:
            self._on_arrival(payload)

    # -- accounting -------------------------------------------------------

    def _finalise(self) -> SimReport:
        end = self.now
        c = self.cluster
        for sid in sorted(c.free_list.entries):
            expiry = c.free_list.expiry(sid)
            c.set_state(c.free_list.take(sid), TERMINATED, expiry)
        for server in c.servers.values():
            if server.state not in (REVOKED, TERMINATED):
                c._close_epoch(server, end)
                server.ended_at = max(end, server.ready_at)
        cost = {a: 0.0 for a in self.apps}
        for seg in c.billing:
            stop = seg.end
            if not self.scenario.charge_warning_period and seg.server_id in self.warned_at:
                stop = min(stop, self.warned_at[seg.server_id])
            if stop <= seg.start or not seg.shares:
                continue
            amount = self.price_integral(seg.market, seg.start, stop) / 3600.0
            for a, share in seg.shares:
                cost[a] += share * amount
        results = {}
        for app_id, app in sorted(self.apps.items()):
            spec = app.spec
            n = servers_per_market(app.base_weights, spec.r, self.scenario.catalog)
            od_rate = sum(n[m] * self.scenario.catalog[m].on_demand_price for m in n)
            baseline_cost = od_rate * app.baseline_time / 3600.0
            completion = app.finished_at - app.arrival
            results[app_id] = AppResult(
                app=app_id,
                kind=spec.kind,
                arrival=app.arrival,
                finish_time=app.finished_at,
                completion_time=completion,
                baseline_time=app.baseline_time,
                runtime_increase_fraction=completion / app.baseline_time - 1.0,
                transient_cost=cost[app_id],
                on_demand_cost_baseline=baseline_cost,
                savings_fraction=1.0 - cost[app_id] / baseline_cost,
                revocation_count=app.revocations,
                checkpoints_written=app.checkpoints_written,
                rollback_work_lost_seconds=app.rollback_lost,
                checkpoint_interval_seconds=app.tau,
                portfolio=dict(sorted(app.base_weights.items())),
                checkpoint_times=[t for t, _ in app.checkpoint_log],
            )
        swan = None
        by_time = {}
        for r in self.revocation_log:
            by_time.setdefault(r["revoked_at"], set()).add(r["market"])
        for t, ms in sorted(by_time.items()):
            if len(ms) == len(self.scenario.prices.markets) and len(ms) > 1:
                swan = {"revoked_at": t, "markets": len(ms)}
                break
        cluster = {
            "total_server_hours": c.server_hours(end),
            "servers_launched": len(c.servers),
            "revocation_log": self.revocation_log,
            "black_swan": swan,
            "end_time": end,
        }
        billing = None
        if self.record:
            billing = [
                {"server": b.server_id, "market": b.market, "start": b.start, "end": b.end,
                 "shares": dict(b.shares)} for b in c.billing
            ]
        return SimReport(
            results,
            cluster,
            scenario={"seed": self.scenario.seed, "sharing_mode": self.scenario.sharing_mode,
                      "tick_seconds": self.scenario.tick_seconds, "warning_seconds": self.scenario.warning_seconds},
            events=self.events if self.record else None,
            billing=billing,
        )


def run(scenario: Scenario, record_events: bool = False) -> SimReport:
    """Simulate ``scenario``; the report is a pure function of the scenario."""
    return Simulator(scenario, record_events).run()
