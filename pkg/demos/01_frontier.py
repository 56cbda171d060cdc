"""
Picking markets along the risk/return frontier
==============================================

Synthetic prices for eight markets, the three covariance flavours, and how
the optimal mix changes as the risk aversion alpha grows.
"""
from __future__ import annotations

import numpy as np

from spotfolio import (
    BidPolicy,
    SyntheticScenarioSpec,
    align,
    covariance_matrix,
    frontier,
    generate_synthetic,
    mttr_table,
    returns_vector,
    synthetic_catalog,
)

catalog = synthetic_catalog(8, seed=1)
spec = SyntheticScenarioSpec(
    discount_model="mean-reverting-with-spikes",
    discount_fraction=0.3,
    volatility=0.02,
    spike_rate=0.05,
    correlation_model="shared-spike-probability",
    rho=0.4,
    seed=1,
)
prices = align(generate_synthetic(spec, catalog, 7 * 86400), 300)

# return of market i is 1 - mean(spot) / on-demand
ret = returns_vector(prices, catalog)
for m, c in zip(ret.markets, ret.values):
    print(f"{m:24s} return {c:.3f}")

# bid at on-demand: a revocation is any tick priced above it
bids = BidPolicy.on_demand(catalog)
for m, est in mttr_table(prices, bids).items():
    note = " (censored)" if est.censored else ""
    print(f"{m:24s} MTTR {est.mttr_seconds / 3600:7.1f} h{note}")

for kind in ("price", "hybrid", "revocation"):
    cov = covariance_matrix(prices, catalog, bids, kind)
    print(f"\n{kind} covariance, smallest eigenvalue {cov.min_eigenvalue():.2e}")
    pts = frontier(ret, cov)
    for pt in pts[::5]:
        held = int(np.sum(pt.weights > 1e-6))
        print(f"  alpha {pt.alpha:9.3g}  return {pt.expected_return:.4f}  risk {pt.risk:.3e}  markets {held}")

# at alpha = 0 all weight goes to the cheapest market
print("\nalpha = 0 weights", np.round(pts[0].weights, 3))
print("largest alpha weights", np.round(pts[-1].weights, 3))
