from __future__ import annotations

import numpy as np
import pytest

from spotfolio import (
    Grid,
    PriceSeries,
    SyntheticScenarioSpec,
    align,
    generate_synthetic,
    inject_spike,
    load_market_catalog,
    load_price_traces,
    resample,
    write_market_catalog,
    write_price_traces,
)
from spotfolio.errors import (
    DuplicateMarket,
    EmptyTrace,
    InvalidSpec,
    MalformedRow,
    NoCommonWindow,
    NonPositiveValue,
    NoPriorObservation,
    UnknownMarket,
)
from spotfolio.market_data import MarketCatalog, MarketCatalogEntry

from builders import catalog


def test_resample_carries_forward():
    s = PriceSeries("a", [0, 150], [1.0, 2.0])
    assert resample(s, Grid(0, 100, 3)).tolist() == [1.0, 1.0, 2.0]


def test_resample_needs_prior_observation():
    s = PriceSeries("a", [10, 150], [1.0, 2.0])
    with pytest.raises(NoPriorObservation):
        resample(s, Grid(0, 100, 3))


def test_align_uses_span_intersection():
    traces = {
        "a": PriceSeries("a", [0, 100], [1.0, 1.5]),
        "b": PriceSeries("b", [50, 200], [2.0, 3.0]),
    }
    u = align(traces, 50)
    assert u.grid.times.tolist() == [50, 100]
    assert u.row("a").tolist() == [1.0, 1.5]
    assert u.row("b").tolist() == [2.0, 2.0]


def test_align_disjoint_spans():
    traces = {"a": PriceSeries("a", [0, 10], [1.0, 1.0]), "b": PriceSeries("b", [20, 30], [1.0, 1.0])}
    with pytest.raises(NoCommonWindow):
        align(traces, 5)


@pytest.mark.parametrize(
    "kwargs, exc",
    [
        (dict(timestamps=[], prices=[]), EmptyTrace),
        (dict(timestamps=[0, 1], prices=[1.0, 0.0]), NonPositiveValue),
        (dict(timestamps=[1, 1], prices=[1.0, 1.0]), InvalidSpec),
    ],
)
def test_price_series_validation(kwargs, exc):
    with pytest.raises(exc):
        PriceSeries("a", **kwargs)


def test_catalog_rejects_duplicates_and_unknown_lookups():
    e = MarketCatalogEntry("a", "z", 2, 7.5, 0.1)
    with pytest.raises(DuplicateMarket):
        MarketCatalog([e, e])
    with pytest.raises(UnknownMarket):
        MarketCatalog([e])["b"]


def test_csv_round_trip(tmp_path):
    cat = catalog(3)
    write_market_catalog(tmp_path / "catalog.csv", cat)
    back = load_market_catalog(tmp_path / "catalog.csv")
    assert back.entries() == cat.entries()
    traces = generate_synthetic(SyntheticScenarioSpec(discount_model="mean-reverting-with-spikes", seed=4), cat, 36000)
    write_price_traces(tmp_path / "traces.csv", traces)
    assert load_price_traces(tmp_path / "traces.csv", back) == traces


def test_bad_rows_name_the_line(tmp_path):
    p = tmp_path / "catalog.csv"
    p.write_text("market_id,zone,cpu_cores,mem_gb,on_demand_price\na,z,2,7.5,0.1\nb,z,two,7.5,0.1\n")
    with pytest.raises(MalformedRow) as info:
        load_market_catalog(p)
    assert "3" in str(info.value)


def test_traces_must_reference_catalog(tmp_path):
    p = tmp_path / "traces.csv"
    p.write_text("timestamp,market_id,price\n0,zz,0.1\n")
    with pytest.raises(UnknownMarket):
        load_price_traces(p, catalog(2))


def test_synthetic_is_deterministic():
    cat = catalog(4)
    spec = SyntheticScenarioSpec(discount_model="mean-reverting-with-spikes", spike_rate=0.2, seed=11)
    assert generate_synthetic(spec, cat, 86400) == generate_synthetic(spec, cat, 86400)
    other = generate_synthetic(SyntheticScenarioSpec(**{**spec.__dict__, "seed": 12}), cat, 86400)
    assert other != generate_synthetic(spec, cat, 86400)


def test_fixed_fraction_is_constant():
    cat = catalog(3)
    u = align(generate_synthetic(SyntheticScenarioSpec(discount_fraction=0.2), cat, 3600), 300)
    assert np.all(u.values == 0.2 * 0.4)


def test_black_swan_hits_every_market():
    cat = catalog(3)
    spec = SyntheticScenarioSpec(black_swan_time=1500, spike_dwell_ticks=2)
    u = align(generate_synthetic(spec, cat, 6000), 300)
    k = 1500 // 300
    assert np.all(u.values[:, k : k + 2] == 4.0)
    assert np.allclose(u.values[:, k + 2], 0.2 * 0.4)


def test_all_correlated_spikes_coincide():
    cat = catalog(4)
    spec = SyntheticScenarioSpec(spike_rate=1.0, correlation_model="all-correlated", seed=3)
    u = align(generate_synthetic(spec, cat, 86400), 300)
    spiking = u.values > 0.4
    assert spiking.any()
    assert np.all(spiking == spiking[0])


def test_inject_spike_window():
    s = PriceSeries("a", [0, 1000], [0.1, 0.1])
    out = inject_spike(s, 300, 200, on_demand=0.5)
    g = resample(out, Grid(0, 100, 11))
    assert g.tolist() == [0.1, 0.1, 0.1, 5.0, 5.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]


def test_synthetic_options_validation():
    with pytest.raises(InvalidSpec):
        SyntheticScenarioSpec(discount_model="brownian")
    with pytest.raises(InvalidSpec):
        SyntheticScenarioSpec(rho=1.5)
    with pytest.raises(InvalidSpec):
        SyntheticScenarioSpec.from_mapping({"colour": "red"})
