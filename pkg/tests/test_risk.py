from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotfolio import (
    BidPolicy,
    CovarianceMatrix,
    Grid,
    UniformSeriesSet,
    covariance_matrix,
    mttr,
    mttr_table,
    psd_repair,
    returns_vector,
    simultaneous_revocation_probability,
)
from spotfolio.errors import InvalidSpec, LengthMismatch, NonSymmetricInput, TooShort
from spotfolio.risk import (
    expected_return,
    hybrid_transform,
    price_covariance,
    revocation_events,
    synthetic_correlated_matrix,
    window_ticks_for,
)

from builders import catalog


def test_expected_return_is_discount():
    assert expected_return([0.1, 0.3], 0.4) == pytest.approx(0.5)


def test_revocation_events_are_upward_crossings():
    assert revocation_events([1, 3, 1, 1, 3, 3], 2.0).tolist() == [1, 4]
    # a series that starts above the bid has not crossed
    assert revocation_events([3, 3, 1], 2.0).tolist() == []


def test_price_covariance_population():
    assert price_covariance([1, 2, 3], [3, 2, 1]) == pytest.approx(-2 / 3)
    with pytest.raises(LengthMismatch):
        price_covariance([1, 2], [1, 2, 3])
    with pytest.raises(TooShort):
        price_covariance([1], [1])


def test_simultaneous_revocation_probability():
    x = [1, 3, 1, 1, 3, 1, 1, 1]  # events at 1, 4
    y = [1, 3, 1, 1, 1, 1, 1, 3]  # events at 1, 7
    assert simultaneous_revocation_probability(x, y, (2.0, 2.0)) == pytest.approx(1 / 3)
    assert simultaneous_revocation_probability(x, x, (2.0, 2.0)) == 1.0
    flat = [1.0] * 8
    assert simultaneous_revocation_probability(flat, flat, (2.0, 2.0)) == 0.0


def test_simultaneity_window():
    x = [1, 3, 1, 1, 1]
    y = [1, 1, 3, 1, 1]
    assert simultaneous_revocation_probability(x, y, (2.0, 2.0)) == 0.0
    assert simultaneous_revocation_probability(x, y, (2.0, 2.0), window_ticks=1) == 1.0
    assert window_ticks_for(300) == 0
    assert window_ticks_for(60) == 4


def test_hybrid_transform_penalises_at_or_above_bid():
    assert hybrid_transform([0.5, 1.0, 1.5], 1.0, 0.5).tolist() == [0.5, 5.0, 5.0]


def test_mttr_three_events_over_thirty_hours():
    s = np.ones(30)
    s[[5, 15, 25]] = 3.0
    est = mttr(s, 2.0, 3600)
    assert est.mttr_seconds == 10 * 3600
    assert est.revocation_count == 3 and not est.censored


def test_mttr_censored_without_revocations():
    est = mttr(np.ones(12), 2.0, 300)
    assert est.censored and est.mttr_seconds == 3600


def _set(values, step=300):
    cat = catalog(len(values))
    return cat, UniformSeriesSet(cat.ids, Grid(0, step, len(values[0])), np.asarray(values, dtype=float))


def test_revocation_matrix_identical_markets():
    cat, u = _set([[0.1, 4.0, 0.1, 4.0], [0.1, 4.0, 0.1, 4.0], [0.1] * 4])
    v = covariance_matrix(u, cat, BidPolicy.on_demand(cat), kind="revocation").entries
    assert v[0, 1] == 1.0
    assert v[0, 0] == 1.0 and v[2, 2] == 0.0
    assert v[0, 2] == 0.0


def test_price_covariance_is_on_normalised_prices():
    cat, u = _set([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]])
    v = covariance_matrix(u, cat).entries
    assert v[0, 1] == pytest.approx(price_covariance([0.25, 0.5, 0.75], [0.75, 0.5, 0.25]))


def test_hybrid_penalty_in_normalised_units():
    cat, u = _set([[0.1, 0.5], [0.1, 0.1]])
    v = covariance_matrix(u, cat, BidPolicy.on_demand(cat), kind="hybrid").entries
    # normalised series [0.25, 10]: population variance (9.75 / 2) ** 2
    assert v[0, 0] == pytest.approx((9.75 / 2) ** 2)
    assert v[1, 1] == 0.0


def test_kind_requirements():
    cat, u = _set([[0.1, 0.2], [0.2, 0.1]])
    with pytest.raises(InvalidSpec):
        covariance_matrix(u, cat, kind="hybrid")
    with pytest.raises(InvalidSpec):
        covariance_matrix(u.subset(u.markets[:1]), cat)


def test_returns_vector_and_mttr_table():
    cat, u = _set([[0.1, 0.5, 0.1], [0.2, 0.2, 0.2]])
    rv = returns_vector(u, cat)
    assert rv.values == pytest.approx([1 - (0.7 / 3) / 0.4, 0.5])
    table = mttr_table(u, BidPolicy.on_demand(cat))
    assert table[cat.ids[0]].revocation_count == 1
    assert table[cat.ids[1]].censored


def test_psd_repair_clips_negative_eigenvalues():
    m = CovarianceMatrix(("a", "b"), "synthetic", [[1.0, 2.0], [2.0, 1.0]])
    fixed = psd_repair(m)
    assert fixed.repaired
    assert fixed.min_eigenvalue() >= -1e-12
    assert np.allclose(fixed.entries, [[1.5, 1.5], [1.5, 1.5]])
    ok = CovarianceMatrix(("a",), "synthetic", [[1.0]])
    assert psd_repair(ok) is ok


def test_psd_repair_rejects_asymmetric():
    with pytest.raises(NonSymmetricInput):
        psd_repair(CovarianceMatrix(("a", "b"), "synthetic", [[1.0, 0.5], [0.0, 1.0]]))


def test_correlated_matrix_floor():
    v = synthetic_correlated_matrix([f"m{i}" for i in range(6)], seed=1).entries
    sd = np.sqrt(np.diag(v))
    corr = v / np.outer(sd, sd)
    assert corr[~np.eye(6, dtype=bool)].min() >= 0.49
    assert np.linalg.eigvalsh(v)[0] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(3, 40), st.integers(0, 2**32 - 1))
def test_every_kind_is_psd(n, ticks, seed):
    rng = np.random.default_rng(seed)
    cat = catalog(n)
    vals = rng.uniform(0.05, 0.8, (n, ticks))
    u = UniformSeriesSet(cat.ids, Grid(0, 300, ticks), vals)
    for kind in ("price", "hybrid", "revocation"):
        v = covariance_matrix(u, cat, BidPolicy.on_demand(cat), kind=kind)
        assert v.min_eigenvalue() >= -1e-8
        assert np.allclose(v.entries, v.entries.T)
