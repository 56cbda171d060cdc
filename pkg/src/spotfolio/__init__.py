"""Portfolio-based selection and management of revocable cloud servers."""
from __future__ import annotations
from .errors import *  # noqa: F401,F403
from .market_data import (
    Grid,
    MarketCatalog,
    MarketCatalogEntry,
    PriceSeries,
    SyntheticScenarioSpec,
    UniformSeriesSet,
    align,
    generate_synthetic,
    inject_spike,
    load_market_catalog,
    load_price_traces,
    resample,
    synthetic_catalog,
    write_market_catalog,
    write_price_traces,
)
from .risk import (
    BidPolicy,
    CovarianceMatrix,
    MttrEstimate,
    ReturnsVector,
    covariance_matrix,
    mttr,
    mttr_table,
    psd_repair,
    returns_vector,
    simultaneous_revocation_probability,
)
from .optimizer import (
    MarketConstraints,
    Portfolio,
    PortfolioCache,
    PortfolioProblem,
    brute_force_solve,
    default_alpha_grid,
    filter_markets,
    frontier,
    greedy_select,
    lowest_cost_select,
    solve,
)
from .allocator import (
    ClusterState,
    FreeList,
    ResourceVector,
    adjust_resources,
    allocate_private,
    allocate_shared,
    release,
    servers_per_market,
)

__version__ = "0.1.0"
