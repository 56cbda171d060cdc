"""Turn portfolio weights into servers and containers.

Weight ``x_i`` is the fraction of the application's resource vector placed
in market ``i``. Market ``i`` therefore needs ``x_i * r`` and gets

    n_i = ceil(max(x_i * r_cpu / CPU_i, x_i * r_mem / MEM_i))

servers. In shared mode the demand is first carved out of surplus capacity
on servers already running in that market.

:class:`ClusterState` owns every server. All mutations take the current
simulated time so the cluster can keep billing epochs: a segment
``[start, end)`` per server during which its owner shares were constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import InvalidSpec, UnknownApp, UnknownMarket
from .market_data import MarketCatalog
from .optimizer import WEIGHT_TRUNCATION, Portfolio

CEIL_SLACK = 1e-9
EPS = 1e-9
DEFAULT_HOLD_SECONDS = 600.0

RUNNING, WARNED, REVOKED, FREE_LISTED, TERMINATED = (
    "running", "warned", "revoked", "free-listed", "terminated",
)
_TRANSITIONS = {
    RUNNING: {WARNED, FREE_LISTED},
    WARNED: {REVOKED},
    FREE_LISTED: {RUNNING, TERMINATED},
    REVOKED: set(),
    TERMINATED: set(),
}


@dataclass(frozen=True)
class ResourceVector:
    cpu: float
    mem: float

    def __post_init__(self):
        if self.cpu < 0 or self.mem < 0:
            raise InvalidSpec(f"resource components must be >= 0, got ({self.cpu}, {self.mem})")

    def __add__(self, other):
        return ResourceVector(self.cpu + other.cpu, self.mem + other.mem)

    def minus(self, other) -> "ResourceVector":
        """Componentwise difference clipped at zero."""
        return ResourceVector(max(0.0, self.cpu - other.cpu), max(0.0, self.mem - other.mem))

    def scale(self, k: float) -> "ResourceVector":
        return ResourceVector(self.cpu * k, self.mem * k)

    def min(self, other) -> "ResourceVector":
        return ResourceVector(min(self.cpu, other.cpu), min(self.mem, other.mem))

    def covers(self, need, tol: float = EPS) -> bool:
        return self.cpu >= need.cpu - tol and self.mem >= need.mem - tol

    @property
    def is_zero(self) -> bool:
        return self.cpu <= EPS and self.mem <= EPS


ZERO = ResourceVector(0.0, 0.0)


def demand_vector(cpu: float, mem: float) -> ResourceVector:
    r = ResourceVector(float(cpu), float(mem))
    if r.cpu <= 0 and r.mem <= 0:
        raise InvalidSpec("a resource vector needs at least one positive component")
    return r


@dataclass
class ServerInstance:
    id: int
    market: str
    capacity: ResourceVector
    state: str = RUNNING
    launched_at: float = 0.0
    ready_at: float = 0.0
    ended_at: float | None = None
    exclusive_to: str | None = None
    allocations: dict = field(default_factory=dict)

    @property
    def allocated(self) -> ResourceVector:
        total = ZERO
        for v in self.allocations.values():
            total = total + v
        return total

    @property
    def surplus(self) -> ResourceVector:
        return self.capacity.minus(self.allocated)

    @property
    def owner_apps(self) -> set:
        return set(self.allocations)

    def shares(self) -> dict:
        """Cost shares of the owners: by allocated CPU, or by memory for memory-only use."""
        if not self.allocations:
            return {}
        cpu = sum(v.cpu for v in self.allocations.values())
        if cpu > EPS:
            return {a: v.cpu / cpu for a, v in sorted(self.allocations.items())}
        mem = sum(v.mem for v in self.allocations.values())
        if mem > EPS:
            return {a: v.mem / mem for a, v in sorted(self.allocations.items())}
        n = len(self.allocations)
        return {a: 1.0 / n for a in sorted(self.allocations)}


@dataclass(frozen=True)
class BillingSegment:
    server_id: int
    market: str
    start: float
    end: float
    shares: tuple  # ((app_id, fraction), ...)


@dataclass
class MarketPlan:
    market: str
    n_new: int = 0
    reused: list = field(default_factory=list)
    containers: list = field(default_factory=list)  # (server_id, ResourceVector)

    @property
    def allocated(self) -> ResourceVector:
        total = ZERO
        for _, v in self.containers:
            total = total + v
        return total


@dataclass
class AllocationPlan:
    app: str
    markets: dict = field(default_factory=dict)
    released: list = field(default_factory=list)

    def market(self, m: str) -> MarketPlan:
        return self.markets.setdefault(m, MarketPlan(m))

    @property
    def n_new(self) -> int:
        return sum(p.n_new for p in self.markets.values())

    @property
    def is_empty(self) -> bool:
        return not self.released and all(
            p.n_new == 0 and not p.reused and not p.containers for p in self.markets.values()
        )

    def server_counts(self) -> dict:
        return {m: len({sid for sid, _ in p.containers}) for m, p in sorted(self.markets.items())}


@dataclass
class AppAllocation:
    app: str
    weights: dict
    r: ResourceVector
    mode: str  # private | shared


class FreeList:
    """Relinquished servers held for reuse; each expires ``hold_duration`` after release."""

    def __init__(self, hold_duration: float = DEFAULT_HOLD_SECONDS):
        self.hold_duration = float(hold_duration)
        self.entries: dict = {}  # server id -> (server, release time)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, server_id):
        return server_id in self.entries

    def add(self, server: ServerInstance, now: float):
        self.entries[server.id] = (server, float(now))

    def expiry(self, server_id) -> float:
        return self.entries[server_id][1] + self.hold_duration

    def next_expiry(self) -> float | None:
        if not self.entries:
            return None
        return min(t for _, t in self.entries.values()) + self.hold_duration

    def candidates(self, market: str) -> list:
        return sorted((s for s, _ in self.entries.values() if s.market == market), key=lambda s: s.id)

    def take(self, server_id) -> ServerInstance:
        server, _ = self.entries.pop(server_id)
        return server

    def due(self, now: float) -> list:
        return sorted(
            (s for s, t in self.entries.values() if t + self.hold_duration <= now + EPS),
            key=lambda s: s.id,
        )


class ClusterState:
    """Every server the allocator has launched, plus the free-list and app records."""

    def __init__(self, catalog: MarketCatalog, hold_duration: float = DEFAULT_HOLD_SECONDS):
        self.catalog = catalog
        self.servers: dict = {}
        self.free_list = FreeList(hold_duration)
        self.apps: dict = {}
        self.billing: list = []
        self._epoch: dict = {}  # server id -> epoch start
        self._next_id = 0

    # -- billing ----------------------------------------------------------

    def _close_epoch(self, server: ServerInstance, now: float):
        start = self._epoch.get(server.id)
        if start is None:
            return
        if now > start:
            self.billing.append(
                BillingSegment(server.id, server.market, start, float(now), tuple(server.shares().items()))
            )
        self._epoch[server.id] = max(start, float(now))

    def _touch(self, server: ServerInstance, now: float):
        """Call before changing a server's owners or state."""
        self._close_epoch(server, now)

    def close_all(self, now: float):
        for s in self.servers.values():
            if s.state not in (REVOKED, TERMINATED):
                self._close_epoch(s, now)

    def server_hours(self, until: float) -> float:
        total = 0.0
        for s in self.servers.values():
            end = s.ended_at if s.ended_at is not None else until
            total += max(0.0, end - s.ready_at)
        return total / 3600.0

    # -- lifecycle --------------------------------------------------------

    def launch(self, market: str, now: float, ready_at: float | None = None, exclusive_to=None) -> ServerInstance:
        e = self.catalog[market]
        ready = float(now if ready_at is None else ready_at)
        s = ServerInstance(
            self._next_id, market, ResourceVector(float(e.cpu), float(e.mem)),
            launched_at=float(now), ready_at=ready, exclusive_to=exclusive_to,
        )
        self._next_id += 1
        self.servers[s.id] = s
        self._epoch[s.id] = ready
        return s

    def set_state(self, server: ServerInstance, state: str, now: float):
        if state not in _TRANSITIONS[server.state]:
            raise InvalidSpec(f"server {server.id}: illegal transition {server.state} -> {state}")
        self._touch(server, now)
        server.state = state
        if state in (REVOKED, TERMINATED):
            server.ended_at = max(float(now), server.ready_at)
            self._epoch.pop(server.id, None)
            for app in list(server.allocations):
                del server.allocations[app]

    def add_allocation(self, server: ServerInstance, app: str, amount: ResourceVector, now: float):
        if amount.is_zero:
            return
        self._touch(server, now)
        server.allocations[app] = server.allocations.get(app, ZERO) + amount

    def drop_allocation(self, server: ServerInstance, app: str, now: float):
        if app in server.allocations:
            self._touch(server, now)
            del server.allocations[app]

    def reuse(self, server_id: int, now: float, exclusive_to=None) -> ServerInstance:
        s = self.free_list.take(server_id)
        self.set_state(s, RUNNING, now)
        s.exclusive_to = exclusive_to
        return s

    def to_free_list(self, server: ServerInstance, now: float):
        for app in list(server.allocations):
            self.drop_allocation(server, app, now)
        server.exclusive_to = None
        self.set_state(server, FREE_LISTED, now)
        self.free_list.add(server, now)

    def expire_free_list(self, now: float) -> list:
        done = self.free_list.due(now)
        for s in done:
            expiry = self.free_list.expiry(s.id)
            self.free_list.take(s.id)
            self.set_state(s, TERMINATED, expiry)
        return done

    # -- queries ----------------------------------------------------------

    def live(self, market: str | None = None) -> list:
        return sorted(
            (s for s in self.servers.values()
             if s.state == RUNNING and (market is None or s.market == market)),
            key=lambda s: s.id,
        )

    def app_servers(self, app: str, market: str | None = None) -> list:
        return sorted(
            (s for s in self.servers.values()
             if app in s.allocations and (market is None or s.market == market)),
            key=lambda s: s.id,
        )

    def held(self, app: str, market: str, now: float | None = None, usable_only: bool = False) -> ResourceVector:
        """Resources the app holds in ``market``; optionally only on ready, unwarned servers."""
        total = ZERO
        for s in self.app_servers(app, market):
            if usable_only and (s.state != RUNNING or (now is not None and s.ready_at > now + EPS)):
                continue
            total = total + s.allocations[app]
        return total


# --------------------------------------------------------------------------
# server counts


def _weights_of(portfolio) -> dict:
    if isinstance(portfolio, Portfolio):
        return {m: float(w) for m, w in zip(portfolio.markets, portfolio.weights)}
    return {m: float(w) for m, w in dict(portfolio).items()}


def _servers_needed(need: ResourceVector, capacity: ResourceVector) -> int:
    ratio = max(need.cpu / capacity.cpu, need.mem / capacity.mem)
    if ratio <= EPS:
        return 0
    return max(1, math.ceil(ratio - CEIL_SLACK))


def servers_per_market(portfolio, r: ResourceVector, catalog: MarketCatalog) -> dict:
    """Server count per market so each market's capacity covers ``x_i * r``."""
    out = {}
    for m, x in sorted(_weights_of(portfolio).items()):
        if m not in catalog:
            raise UnknownMarket(f"portfolio market {m!r} not in catalog")
        e = catalog[m]
        out[m] = 0 if x <= 0 else _servers_needed(r.scale(x), ResourceVector(e.cpu, e.mem))
    return out


def allocation_weights(portfolio) -> dict:
    """Weights after dropping negligible markets (< 1e-6) and renormalising."""
    if isinstance(portfolio, Portfolio):
        p = portfolio.truncated(WEIGHT_TRUNCATION)
        return {m: float(w) for m, w in zip(p.markets, p.weights) if w > 0}
    w = {m: x for m, x in _weights_of(portfolio).items() if x >= WEIGHT_TRUNCATION}
    total = sum(w.values())
    if total <= 0:
        raise InvalidSpec("portfolio has no weight to allocate")
    return {m: x / total for m, x in sorted(w.items())}


# --------------------------------------------------------------------------
# placement primitives


def _carve(cluster, app, servers, demand, plan, now):
    """Take ``min(surplus, remaining)`` from each server in order; return what is left."""
    remaining = demand
    for s in servers:
        if remaining.is_zero:
            break
        take = s.surplus.min(remaining)
        if take.is_zero:
            continue
        cluster.add_allocation(s, app, take, now)
        plan.containers.append((s.id, take))
        remaining = remaining.minus(take)
    return remaining


def _fill_new(cluster, app, market, remaining, plan, now, ready_at, exclusive):
    e = cluster.catalog[market]
    n = _servers_needed(remaining, ResourceVector(e.cpu, e.mem))
    for _ in range(n):
        s = cluster.launch(market, now, ready_at, exclusive_to=app if exclusive else None)
        plan.n_new += 1
        remaining = _carve(cluster, app, [s], remaining, plan, now)
    return remaining


def _shared_order(servers, first_fit):
    if first_fit:
        return sorted(servers, key=lambda s: s.id)
    return sorted(servers, key=lambda s: (-s.surplus.cpu, -s.surplus.mem, s.id))


def _carve_shared(cluster, app, servers, demand, plan, now, capacity, budget):
    """Like :func:`_carve`, but only touch a server if the app's server count stays within ``budget``.

    A fragment on a server keeps that server alive until the app leaves, so
    a crumb of surplus is worth taking only when it saves a whole launch.
    """
    remaining = demand
    for s in servers:
        if remaining.is_zero:
            break
        take = s.surplus.min(remaining)
        if take.is_zero:
            continue
        touched = app in s.allocations
        after = remaining.minus(take)
        if not touched and 1 + _servers_needed(after, capacity) > budget:
            continue
        cluster.add_allocation(s, app, take, now)
        plan.containers.append((s.id, take))
        remaining = after
        budget -= 0 if touched else 1
    return remaining


def _place(cluster, app, market, demand, mode, plan, now, ready_at, first_fit=False, target=None):
    """Cover ``demand`` in ``market`` for ``app``: own surplus, shared surplus, free-list, new.

    In shared mode the app never ends up on more servers in the market than
    a private allocation of ``target`` (default ``demand``) would launch.
    """
    remaining = demand
    own = [s for s in cluster.app_servers(app, market) if s.state == RUNNING and s.exclusive_to == app]
    remaining = _carve(cluster, app, own, remaining, plan, now)
    if mode == "shared" and not remaining.is_zero:
        e = cluster.catalog[market]
        cap = ResourceVector(e.cpu, e.mem)
        held = [s for s in cluster.app_servers(app, market) if s.state == RUNNING]
        budget = _servers_needed(target or demand, cap) - len(held)
        pool = _shared_order([s for s in cluster.live(market) if s.exclusive_to is None], first_fit)
        remaining = _carve_shared(cluster, app, pool, remaining, plan, now, cap, budget)
    exclusive = mode == "private"
    for s in cluster.free_list.candidates(market):
        if remaining.is_zero:
            break
        cluster.reuse(s.id, now, exclusive_to=app if exclusive else None)
        plan.reused.append(s.id)
        remaining = _carve(cluster, app, [s], remaining, plan, now)
    if not remaining.is_zero:
        remaining = _fill_new(cluster, app, market, remaining, plan, now, ready_at, exclusive)
    return remaining


def _register(cluster, app, weights, r, mode):
    cluster.apps[app] = AppAllocation(app, dict(weights), r, mode)


def allocate_private(app, portfolio, r, catalog, cluster: ClusterState, now=0.0, ready_at=None) -> AllocationPlan:
    """Exclusive servers per market: free-list first, then new launches, up to the ceiling count."""
    weights = allocation_weights(portfolio)
    counts = servers_per_market(weights, r, catalog)
    plan = AllocationPlan(app)
    for m, x in sorted(weights.items()):
        mp = plan.market(m)
        servers = []
        for s in cluster.free_list.candidates(m)[: counts[m]]:
            cluster.reuse(s.id, now, exclusive_to=app)
            mp.reused.append(s.id)
            servers.append(s)
        for _ in range(counts[m] - len(servers)):
            servers.append(cluster.launch(m, now, ready_at, exclusive_to=app))
            mp.n_new += 1
        _carve(cluster, app, servers, r.scale(x), mp, now)
    _register(cluster, app, weights, r, "private")
    return plan


def allocate_shared(app, portfolio, r, catalog, cluster: ClusterState, now=0.0, ready_at=None, first_fit=False) -> AllocationPlan:
    """Pack into surplus on running shared servers (most free first), then free-list, then launch."""
    weights = allocation_weights(portfolio)
    for m in weights:
        if m not in catalog:
            raise UnknownMarket(f"portfolio market {m!r} not in catalog")
    plan = AllocationPlan(app)
    for m, x in sorted(weights.items()):
        _place(cluster, app, m, r.scale(x), "shared", plan.market(m), now, ready_at, first_fit)
    _register(cluster, app, weights, r, "shared")
    return plan


def top_up(app, weights: Mapping[str, float], cluster: ClusterState, now, ready_at=None,
           r: ResourceVector | None = None, first_fit=False, markets: Iterable[str] | None = None) -> AllocationPlan:
    """Bring the app's holdings on running servers up to ``x_i * r`` in every market.

    ``markets`` limits the top-up to those markets; the app's weights are
    still replaced by ``weights``.
    """
    if app not in cluster.apps:
        raise UnknownApp(f"application {app!r} holds no allocation")
    rec = cluster.apps[app]
    r = rec.r if r is None else r
    only = None if markets is None else set(markets)
    plan = AllocationPlan(app)
    for m, x in sorted(weights.items()):
        if x <= 0 or (only is not None and m not in only):
            continue
        held = ZERO
        for s in cluster.app_servers(app, m):
            if s.state == RUNNING:
                held = held + s.allocations[app]
        deficit = r.scale(x).minus(held)
        if not deficit.is_zero:
            _place(cluster, app, m, deficit, rec.mode, plan.market(m), now, ready_at, first_fit, target=r.scale(x))
    rec.weights = dict(weights)
    rec.r = r
    return plan


def release(app, cluster: ClusterState, now) -> list:
    """Give up everything the app holds; returns the ids of servers moved to the free-list."""
    if app not in cluster.apps:
        raise UnknownApp(f"application {app!r} holds no allocation")
    freed = []
    for s in cluster.app_servers(app):
        cluster.drop_allocation(s, app, now)
        if s.state == RUNNING and (s.exclusive_to == app or not s.allocations):
            cluster.to_free_list(s, now)
            freed.append(s.id)
    del cluster.apps[app]
    return freed


def release_market(app, market, cluster: ClusterState, now) -> list:
    """Give up the app's holdings in one market (voluntary relinquish)."""
    freed = []
    for s in cluster.app_servers(app, market):
        cluster.drop_allocation(s, app, now)
        if s.state == RUNNING and (s.exclusive_to == app or not s.allocations):
            cluster.to_free_list(s, now)
            freed.append(s.id)
    return freed


def adjust_resources(app, new_r: ResourceVector, cluster: ClusterState, now=0.0, ready_at=None) -> AllocationPlan:
    """Resize to ``new_r`` with the app's current weights.

    Growth is placed like a fresh allocation. For shrinkage whole servers are
    given back, largest surplus first, as long as the rest still covers
    ``x_i * new_r``.
    """
    if app not in cluster.apps:
        raise UnknownApp(f"application {app!r} holds no allocation")
    rec = cluster.apps[app]
    plan = top_up(app, rec.weights, cluster, now, ready_at, r=new_r)
    for m, x in sorted(rec.weights.items()):
        need = new_r.scale(x)
        servers = [s for s in cluster.app_servers(app, m) if s.state == RUNNING]
        held = ZERO
        for s in servers:
            held = held + s.allocations[app]
        for s in sorted(servers, key=lambda s: (-s.surplus.cpu, -s.surplus.mem, s.id)):
            rest = held.minus(s.allocations[app])
            if rest.covers(need) and len(servers) > 1:
                held = rest
                servers.remove(s)
                cluster.drop_allocation(s, app, now)
                if s.exclusive_to == app or not s.allocations:
                    cluster.to_free_list(s, now)
                plan.released.append(s.id)
    return plan
