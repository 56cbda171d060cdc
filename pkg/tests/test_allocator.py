from __future__ import annotations

from fractions import Fraction

import pytest

from spotfolio import (
    ClusterState,
    ResourceVector,
    adjust_resources,
    allocate_private,
    allocate_shared,
    release,
    servers_per_market,
)
from spotfolio.allocator import (
    FREE_LISTED,
    REVOKED,
    RUNNING,
    TERMINATED,
    WARNED,
    allocation_weights,
    release_market,
    top_up,
)
from spotfolio.errors import InvalidSpec, UnknownApp, UnknownMarket
from spotfolio.market_data import MarketCatalog, MarketCatalogEntry


def cat(*specs):
    return MarketCatalog(MarketCatalogEntry(m, "z", cpu, mem, 0.1) for m, cpu, mem in specs)


M3 = cat(("m3.large", 2, 7.5))


def test_count_and_surplus_worked_example():
    r = ResourceVector(2, 10)
    assert servers_per_market({"m3.large": 1.0}, r, M3) == {"m3.large": 2}
    cluster = ClusterState(M3)
    plan = allocate_private("job", {"m3.large": 1.0}, r, M3, cluster)
    assert plan.n_new == 2
    cap = sum((s.capacity for s in cluster.servers.values()), ResourceVector(0, 0))
    surplus = cap.minus(r)
    assert (Fraction(surplus.cpu), Fraction(surplus.mem)) == (Fraction(2), Fraction(5))
    assert sum((s.surplus for s in cluster.servers.values()), ResourceVector(0, 0)) == surplus


def test_exact_fit_needs_one_server():
    assert servers_per_market({"m3.large": 1.0}, ResourceVector(2, 7.5), M3) == {"m3.large": 1}
    # float noise just above an integer ratio does not add a server
    assert servers_per_market({"m3.large": 1.0}, ResourceVector(2 * (1 + 1e-12), 7.5), M3) == {"m3.large": 1}


def test_split_portfolio():
    c = cat(("a", 4, 16.0), ("b", 4, 16.0))
    assert servers_per_market({"a": 0.5, "b": 0.5}, ResourceVector(8, 30), c) == {"a": 1, "b": 1}
    assert servers_per_market({"a": 0.0, "b": 1.0}, ResourceVector(8, 30), c) == {"a": 0, "b": 2}


def test_unknown_market():
    with pytest.raises(UnknownMarket):
        servers_per_market({"zz": 1.0}, ResourceVector(1, 1), M3)


def test_weight_truncation():
    assert allocation_weights({"a": 0.5e-6, "b": 1.0 - 0.5e-6}) == {"b": 1.0}
    with pytest.raises(InvalidSpec):
        allocation_weights({"a": 0.0})


def test_private_prefers_free_list():
    cluster = ClusterState(M3)
    allocate_private("a", {"m3.large": 1.0}, ResourceVector(2, 7.5), M3, cluster)
    freed = release("a", cluster, now=100)
    assert freed == [0] and cluster.servers[0].state == FREE_LISTED
    plan = allocate_private("b", {"m3.large": 1.0}, ResourceVector(4, 15), M3, cluster, now=200)
    assert plan.markets["m3.large"].reused == [0]
    assert plan.n_new == 1
    assert cluster.servers[0].exclusive_to == "b"


def test_free_list_expiry_terminates_at_hold_end():
    cluster = ClusterState(M3, hold_duration=600)
    allocate_private("a", {"m3.large": 1.0}, ResourceVector(2, 7.5), M3, cluster)
    release("a", cluster, now=100)
    assert cluster.expire_free_list(650) == []
    (s,) = cluster.expire_free_list(1000)
    assert s.state == TERMINATED and s.ended_at == 700
    assert cluster.server_hours(5000) == pytest.approx(700 / 3600)


def test_shared_packs_into_largest_surplus():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    s0, s1 = cluster.launch("m", 0), cluster.launch("m", 0)
    cluster.add_allocation(s0, "x", ResourceVector(2, 11), 0)  # surplus (2, 5)
    cluster.add_allocation(s1, "y", ResourceVector(3, 8), 0)  # surplus (1, 8)
    plan = allocate_shared("b", {"m": 1.0}, ResourceVector(2, 4), c, cluster, now=10)
    assert plan.n_new == 0
    assert s0.allocations["b"] == ResourceVector(2, 4)
    assert "b" not in s1.allocations


def test_first_fit_packs_by_id():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    s0, s1 = cluster.launch("m", 0), cluster.launch("m", 0)
    cluster.add_allocation(s0, "x", ResourceVector(3, 8), 0)
    cluster.add_allocation(s1, "y", ResourceVector(1, 1), 0)
    allocate_shared("b", {"m": 1.0}, ResourceVector(1, 4), c, cluster, first_fit=True)
    assert s0.allocations["b"] == ResourceVector(1, 4)


def test_shared_spills_to_new_servers():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    allocate_shared("a", {"m": 1.0}, ResourceVector(3, 12), c, cluster)
    plan = allocate_shared("b", {"m": 1.0}, ResourceVector(5, 20), c, cluster)
    assert plan.n_new == 1
    assert cluster.servers[0].allocations["b"] == ResourceVector(1, 4)
    assert cluster.servers[1].allocations["b"] == ResourceVector(4, 16)


def test_shared_skips_crumbs_that_save_nothing():
    # a (1, 4) crumb would still leave b needing a whole new server
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    allocate_shared("a", {"m": 1.0}, ResourceVector(3, 12), c, cluster)
    plan = allocate_shared("b", {"m": 1.0}, ResourceVector(3, 12), c, cluster)
    assert plan.n_new == 1
    assert cluster.servers[0].owner_apps == {"a"}
    assert cluster.servers[1].allocations["b"] == ResourceVector(3, 12)


def test_shared_and_private_never_mix():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    allocate_private("a", {"m": 1.0}, ResourceVector(1, 4), c, cluster)
    plan = allocate_shared("b", {"m": 1.0}, ResourceVector(1, 4), c, cluster)
    assert plan.n_new == 1
    assert cluster.servers[1].owner_apps == {"b"}


def test_release_twice_raises():
    cluster = ClusterState(M3)
    allocate_private("a", {"m3.large": 1.0}, ResourceVector(2, 7.5), M3, cluster)
    release("a", cluster, 0)
    with pytest.raises(UnknownApp):
        release("a", cluster, 0)


def test_release_keeps_shared_servers_for_others():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    allocate_shared("a", {"m": 1.0}, ResourceVector(2, 8), c, cluster)
    allocate_shared("b", {"m": 1.0}, ResourceVector(2, 8), c, cluster)
    assert release("a", cluster, 10) == []
    assert cluster.servers[0].state == RUNNING and cluster.servers[0].owner_apps == {"b"}
    assert release("b", cluster, 20) == [0]


def test_billing_shares_follow_cpu():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    allocate_shared("a", {"m": 1.0}, ResourceVector(1, 8), c, cluster, now=0)
    allocate_shared("b", {"m": 1.0}, ResourceVector(3, 2), c, cluster, now=100)
    cluster.close_all(300)
    segs = [(b.start, b.end, dict(b.shares)) for b in cluster.billing]
    assert segs == [(0.0, 100.0, {"a": 1.0}), (100.0, 300.0, {"a": 0.25, "b": 0.75})]


def test_adjust_grows_and_shrinks():
    c = cat(("m", 2, 8.0))
    cluster = ClusterState(c)
    allocate_private("a", {"m": 1.0}, ResourceVector(4, 16), c, cluster)
    grow = adjust_resources("a", ResourceVector(6, 24), cluster)
    assert grow.n_new == 1 and len(cluster.app_servers("a")) == 3
    shrink = adjust_resources("a", ResourceVector(2, 8), cluster, now=50)
    assert len(shrink.released) == 2
    assert len(cluster.app_servers("a")) == 1
    assert len(cluster.free_list) == 2
    with pytest.raises(UnknownApp):
        adjust_resources("zz", ResourceVector(1, 1), cluster)


def test_adjust_keeps_last_server():
    c = cat(("m", 4, 16.0))
    cluster = ClusterState(c)
    allocate_private("a", {"m": 1.0}, ResourceVector(1, 1), c, cluster)
    plan = adjust_resources("a", ResourceVector(0.5, 0.5), cluster)
    assert plan.released == [] and len(cluster.app_servers("a")) == 1


def test_top_up_restores_after_revocation():
    c = cat(("a", 4, 16.0), ("b", 4, 16.0))
    cluster = ClusterState(c)
    allocate_private("j", {"a": 0.5, "b": 0.5}, ResourceVector(8, 32), c, cluster)
    for s in cluster.app_servers("j", "a"):
        cluster.set_state(s, WARNED, 10)
        cluster.set_state(s, REVOKED, 20)
    assert cluster.app_servers("j", "a") == []
    plan = top_up("j", {"b": 1.0}, cluster, now=30, ready_at=330)
    assert plan.n_new == 1
    assert cluster.held("j", "b") == ResourceVector(8, 32)
    assert cluster.held("j", "b", now=100, usable_only=True) == ResourceVector(4, 16)


def test_release_market():
    c = cat(("a", 4, 16.0), ("b", 4, 16.0))
    cluster = ClusterState(c)
    allocate_private("j", {"a": 0.5, "b": 0.5}, ResourceVector(8, 32), c, cluster)
    assert release_market("j", "a", cluster, 10) == [0]
    assert cluster.app_servers("j", "a") == []


def test_illegal_transition():
    cluster = ClusterState(M3)
    s = cluster.launch("m3.large", 0)
    with pytest.raises(InvalidSpec):
        cluster.set_state(s, REVOKED, 1)
