from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotfolio import (
    CovarianceMatrix,
    MarketConstraints,
    PortfolioCache,
    PortfolioProblem,
    ReturnsVector,
    brute_force_solve,
    default_alpha_grid,
    filter_markets,
    frontier,
    greedy_select,
    lowest_cost_select,
    solve,
)
from spotfolio.errors import (
    DimensionMismatch,
    InvalidSpec,
    KOutOfRange,
    NoCandidateMarkets,
    NotConverged,
    StaleCache,
    TooManyMarkets,
)
from spotfolio.optimizer import project_simplex
from spotfolio.risk import MttrEstimate

from builders import catalog


def problem(c, V, alpha):
    return PortfolioProblem(tuple(f"m{i}" for i in range(len(c))), np.asarray(c, float), np.asarray(V, float), alpha)


def test_two_market_closed_form():
    p = solve(problem([0.9, 0.8], np.diag([0.04, 0.01]), 10.0))
    assert p.weights == pytest.approx([0.3, 0.7], abs=1e-9)
    assert p.gap <= 1e-10


def test_alpha_zero_is_a_vertex():
    p = solve(problem([0.5, 0.7, 0.6], np.eye(3), 0.0))
    assert p.weights.tolist() == [0.0, 1.0, 0.0]


def test_single_market():
    assert solve(problem([0.3], [[0.1]], 5.0)).weights.tolist() == [1.0]


def test_problem_validation():
    with pytest.raises(DimensionMismatch):
        problem([0.1, 0.2], np.eye(3), 1.0)
    with pytest.raises(InvalidSpec):
        problem([0.1, 0.2], np.eye(2), -1.0)


def test_not_converged_carries_best_iterate():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(30, 30))
    with pytest.raises(NotConverged) as info:
        solve(problem(rng.uniform(size=30), a.T @ a, 1.0), gap_tol=0.0, max_iter=3)
    best = info.value.best
    assert info.value.gap > 0
    assert best.weights.sum() == pytest.approx(1.0)


def test_project_simplex():
    x = project_simplex(np.array([0.5, 2.0, -1.0]))
    assert x.tolist() == [0.0, 1.0, 0.0]
    y = project_simplex(np.array([0.2, 0.2]))
    assert y == pytest.approx([0.5, 0.5])


def test_brute_force_limits():
    with pytest.raises(TooManyMarkets):
        brute_force_solve(problem([0.1] * 5, np.eye(5), 1.0))
    p = brute_force_solve(problem([0.9, 0.8], np.diag([0.04, 0.01]), 10.0))
    assert p.weights == pytest.approx([0.3, 0.7], abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.sampled_from([0.0, 0.1, 1.0, 10.0, 100.0]), st.integers(0, 2**32 - 1))
def test_solver_dominates_lattice(n, alpha, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    pr = problem(rng.uniform(0, 1, n), a.T @ a / n, alpha)
    assert pr.objective(solve(pr).weights) >= brute_force_solve(pr, 0.01).objective - 1e-9


def test_greedy_and_lowest_cost():
    rv = ReturnsVector(("a", "b", "c"), [0.5, 0.5, 0.2])
    assert greedy_select(rv, 2).weights.tolist() == [0.5, 0.5, 0.0]
    assert lowest_cost_select(rv).weights.tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(KOutOfRange):
        greedy_select(rv, 4)


def _mttr(cat, values):
    return {m: MttrEstimate(m, v, 1, False) for m, v in zip(cat.ids, values)}


def test_filter_markets_by_mttr_and_pattern():
    cat = catalog(4)
    table = _mttr(cat, [3600, 7200, 14400, 100])
    assert filter_markets(cat, table, MarketConstraints(job_length_seconds=3600)) == ["m1", "m2"]
    assert filter_markets(cat, table, MarketConstraints(exclude=("m0", "m3"))) == ["m1", "m2"]
    assert filter_markets(cat, table, MarketConstraints(include=("m[02]",))) == ["m0", "m2"]
    with pytest.raises(NoCandidateMarkets):
        filter_markets(cat, table, MarketConstraints(min_cpu=8))


def test_filter_max_markets_ranks_by_return():
    cat = catalog(4)
    rv = ReturnsVector(cat.ids, [0.1, 0.9, 0.5, 0.7])
    out = filter_markets(cat, _mttr(cat, [1e6] * 4), MarketConstraints(max_markets=2), rv)
    assert out == ["m1", "m3"]


def _stats(n=4, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    markets = tuple(f"m{i}" for i in range(n))
    return ReturnsVector(markets, rng.uniform(0.5, 0.9, n)), CovarianceMatrix(markets, "synthetic", a.T @ a)


def test_default_grid():
    g = default_alpha_grid()
    assert len(g) == 26 and g[0] == 0.0
    assert g[1] == pytest.approx(1e-3) and g[-1] == pytest.approx(1e3)


def test_frontier_monotone():
    rv, cov = _stats(6, 3)
    pts = frontier(rv, cov)
    for a, b in zip(pts, pts[1:]):
        assert b.risk <= a.risk + 1e-9
        assert b.expected_return <= a.expected_return + 1e-9


def test_frontier_rejects_unsorted():
    rv, cov = _stats()
    with pytest.raises(InvalidSpec):
        frontier(rv, cov, [1.0, 0.5])


def test_cache_lookup_and_staleness():
    rv, cov = _stats()
    cache = PortfolioCache(rv, cov)
    assert len(cache.alphas) == 26
    on_grid = cache.lookup(1.0)
    assert on_grid.objective == pytest.approx(solve(PortfolioProblem.from_stats(rv, cov, 1.0)).objective, abs=1e-12)
    sub = cache.lookup(1.0, ["m0", "m2"])
    assert sub.markets == ("m0", "m2")
    cov.entries[0, 0] += 1.0
    with pytest.raises(StaleCache):
        cache.lookup(1.0)
