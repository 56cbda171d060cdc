from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from spotfolio import write_market_catalog
from spotfolio.cli import main
from spotfolio.market_data import MarketCatalog, MarketCatalogEntry


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def traces(tmp_path):
    spec = tmp_path / "spec.ini"
    spec.write_text("[synthetic]\ndiscount_model = mean-reverting-with-spikes\nspike_rate = 0.05\nmarket_count = 4\n")
    assert main(["synth", str(spec), "--seed", "5", "--duration", "172800", "--out-dir", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.fixture
def stats(tmp_path, traces):
    out = tmp_path / "stats"
    args = ["stats", "--catalog", str(traces / "catalog.csv"), "--traces", str(traces / "traces.csv"),
            "--out-dir", str(out)]
    assert main(args) == 0
    return out


def test_synth_fixed_fraction(tmp_path):
    spec = tmp_path / "spec.ini"
    spec.write_text("discount_fraction = 0.2\nmarket_count = 3\n")
    assert main(["synth", str(spec), "--seed", "1", "--duration", "3600", "--out-dir", str(tmp_path)]) == 0
    od = {r[0]: float(r[4]) for r in rows(tmp_path / "catalog.csv")[1:]}
    prices = rows(tmp_path / "traces.csv")[1:]
    assert prices and all(float(p) == pytest.approx(0.2 * od[m], rel=1e-15) for _, m, p in prices)


def test_synth_needs_seed(tmp_path, capsys):
    spec = tmp_path / "spec.ini"
    spec.write_text("discount_fraction = 0.2\n")
    assert main(["synth", str(spec), "--out-dir", str(tmp_path)]) == 1
    assert "seed" in capsys.readouterr().err


def test_stats_outputs(stats):
    names = sorted(p.name for p in stats.iterdir())
    assert names == ["covariance.csv", "manifest.json", "mttr.csv", "returns.csv"]
    cov = rows(stats / "covariance.csv")
    assert len(cov) == 5 and len(cov[0]) == 4
    manifest = json.loads((stats / "manifest.json").read_text())
    assert manifest["subcommand"] == "stats" and len(manifest["inputs"]) == 2
    assert manifest["config"]["cov_kind"] == "price"


def test_stats_missing_catalog(tmp_path, traces, capsys):
    missing = tmp_path / "nope.csv"
    code = main(["stats", "--catalog", str(missing), "--traces", str(traces / "traces.csv"), "--out-dir", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert str(missing) in err and err.count("\n") == 1


def test_stats_hybrid_needs_bids(tmp_path, traces, capsys):
    base = ["stats", "--catalog", str(traces / "catalog.csv"), "--traces", str(traces / "traces.csv"),
            "--out-dir", str(tmp_path / "h"), "--cov-kind", "hybrid"]
    assert main(base) == 2
    assert "--bid-multiple" in capsys.readouterr().err
    assert main(base + ["--bid-multiple", "1.0"]) == 0


def test_stats_is_reproducible(tmp_path, traces, stats):
    again = tmp_path / "stats"
    main(["stats", "--catalog", str(traces / "catalog.csv"), "--traces", str(traces / "traces.csv"),
          "--out-dir", str(again)])
    first = {p.name: p.read_bytes() for p in stats.iterdir()}
    assert {p.name: p.read_bytes() for p in again.iterdir()} == first


def _stats_args(stats):
    return ["--returns", str(stats / "returns.csv"), "--covariance", str(stats / "covariance.csv")]


def test_portfolio_alpha_zero(tmp_path, stats):
    out = tmp_path / "p"
    assert main(["portfolio", *_stats_args(stats), "--alpha", "0", "--out-dir", str(out)]) == 0
    w = rows(out / "weights.csv")
    assert w[0] == ["market_id", "weight"] and len(w) == 2 and float(w[1][1]) == 1.0


def test_frontier_default_grid(tmp_path, stats):
    out = tmp_path / "f"
    assert main(["frontier", *_stats_args(stats), "--out-dir", str(out)]) == 0
    table = rows(out / "frontier.csv")
    assert table[0][:3] == ["alpha", "expected_return", "risk"]
    assert all(h.startswith("w:") for h in table[0][3:])
    assert len(table) - 1 == 26


def test_frontier_single_alpha_matches_portfolio(tmp_path, stats):
    main(["frontier", *_stats_args(stats), "--alpha", "2.5", "--out-dir", str(tmp_path / "f")])
    main(["portfolio", *_stats_args(stats), "--alpha", "2.5", "--out-dir", str(tmp_path / "p")])
    (header, row), = [rows(tmp_path / "f" / "frontier.csv")]
    fw = {h[2:]: float(v) for h, v in zip(header[3:], row[3:])}
    pw = {m: float(v) for m, v in rows(tmp_path / "p" / "weights.csv")[1:]}
    for m, v in fw.items():
        assert pw.get(m, 0.0) == pytest.approx(v, abs=1e-6)


def test_frontier_repairs_non_psd(tmp_path, stats, capsys):
    bad = tmp_path / "bad.csv"
    header = rows(stats / "covariance.csv")[0]
    n = len(header)
    m = np.full((n, n), 0.9) + np.diag(np.full(n, 0.1))
    m[0, 1] = m[1, 0] = -0.9
    with open(bad, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(m.tolist())
    code = main(["frontier", "--returns", str(stats / "returns.csv"), "--covariance", str(bad),
                 "--alphas", "1", "--out-dir", str(tmp_path / "f")])
    assert code == 0
    err = capsys.readouterr().err
    assert "PSD" in err and err.count("\n") == 1


def test_allocate_worked_example(tmp_path, capsys):
    cat = MarketCatalog([MarketCatalogEntry("m3.large", "z", 2, 7.5, 0.133)])
    write_market_catalog(tmp_path / "catalog.csv", cat)
    (tmp_path / "weights.csv").write_text("market_id,weight\nm3.large,1.0\n")
    code = main(["allocate", "--weights", str(tmp_path / "weights.csv"), "--catalog", str(tmp_path / "catalog.csv"),
                 "--cpu", "2", "--mem", "10", "--out-dir", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    table = list(csv.DictReader(out.splitlines()))
    assert len(table) == 1
    row = table[0]
    assert int(row["servers"]) == 2
    assert float(row["surplus_cpu"]) == 2 and float(row["surplus_mem"]) == 5


SCENARIO = """\
[scenario]
duration_seconds = 172800
[synthetic]
market_count = 3
[app:x]
kind = batch-checkpoint
work_seconds = 3600
cpu = 4
mem = 8
checkpoint_seconds = 60
"""


def test_simulate_requires_seed(tmp_path, capsys):
    (tmp_path / "s.ini").write_text(SCENARIO)
    assert main(["simulate", str(tmp_path / "s.ini"), "--out-dir", str(tmp_path / "o")]) == 1
    assert "--seed" in capsys.readouterr().err


def test_simulate_outputs_and_determinism(tmp_path):
    (tmp_path / "s.ini").write_text(SCENARIO)
    for d in ("a", "b"):
        assert main(["simulate", str(tmp_path / "s.ini"), "--seed", "4", "--out-dir", str(tmp_path / d)]) == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["apps"]["x"]["savings_fraction"] == pytest.approx(0.8)
    assert rep["manifest"]["seed"] == 4
    a = (tmp_path / "a" / "summary.csv").read_bytes()
    assert a == (tmp_path / "b" / "summary.csv").read_bytes()


def test_compare(tmp_path):
    (tmp_path / "s.ini").write_text(SCENARIO.replace("[scenario]", "[scenario]\nseed = 1"))
    (tmp_path / "m.ini").write_text("[matrix]\nscenario = s.ini\napp = x\nrecovery = eager, none\n")
    assert main(["compare", str(tmp_path / "m.ini"), "--out-dir", str(tmp_path)]) == 0
    grid = rows(tmp_path / "grid.csv")
    assert [r[0] for r in grid] == ["recovery", "eager", "none"]


def test_config_file_supplies_defaults(tmp_path, stats):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text("[portfolio]\nalpha = 0\n")
    out = tmp_path / "p"
    assert main(["portfolio", *_stats_args(stats), "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert len(rows(out / "weights.csv")) == 2
    assert main(["portfolio", *_stats_args(stats), "--config", str(cfg), "--alpha", "100", "--out-dir", str(out)]) == 0
    assert len(rows(out / "weights.csv")) > 2


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["allocate", "--cpu", "1"]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spotfolio", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("spotfolio ")
