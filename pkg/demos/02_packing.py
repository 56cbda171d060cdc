"""
From weights to servers
=======================

How a weight vector becomes a server count, and what shared packing saves
compared to giving every application its own machines.
"""
from __future__ import annotations

from spotfolio import ClusterState, ResourceVector, allocate_private, allocate_shared, release, servers_per_market
from spotfolio.market_data import MarketCatalog, MarketCatalogEntry

catalog = MarketCatalog([
    MarketCatalogEntry("m3.large", "us-east-1a", 2, 7.5, 0.133),
    MarketCatalogEntry("m3.xlarge", "us-east-1b", 4, 15.0, 0.266),
])

# 2 cpu and 10 GB on 2 cpu / 7.5 GB servers: memory forces a second server
r = ResourceVector(2, 10)
print(servers_per_market({"m3.large": 1.0}, r, catalog))

cluster = ClusterState(catalog)
allocate_private("a", {"m3.large": 1.0}, r, catalog, cluster)
for s in cluster.servers.values():
    print(f"server {s.id}: surplus {s.surplus.cpu} cpu, {s.surplus.mem} GB")

# shared mode fills that surplus before launching anything
shared = ClusterState(catalog)
allocate_shared("a", {"m3.large": 1.0}, r, catalog, shared)
plan = allocate_shared("b", {"m3.large": 1.0}, ResourceVector(1, 4), catalog, shared)
print("b launched", plan.n_new, "servers; live servers", len(shared.live()))

# a released server waits on the free-list and is reused by the next arrival
release("a", cluster, now=1000)
print("free-listed", len(cluster.free_list))
plan = allocate_private("c", {"m3.large": 1.0}, r, catalog, cluster, now=1200)
print("c reused", plan.market("m3.large").reused, "launched", plan.n_new)
print("server-hours so far", round(cluster.server_hours(1800), 3))
