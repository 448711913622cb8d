"""
Tests for the artifact writers.

This module contains tests for the CSV headers, float precision, JSON
encoding of non-finite values and atomic replacement of output files.
"""

import json

import pytest

from parammarket.services import engine
from parammarket.utils import artifacts


def test_golden_headers(tmp_path):
    """Test the header line of every table, even when it has no rows."""
    expected = {
        "trades.csv": "round,buyer,seller,merge_weight,gain_kind,gain_value,trade_beneficial,"
        "buyer_valuation,seller_valuation,payment,indicator",
        "curves.csv": "round,agent,broker_loss,own_loss,est_error,cum_payment",
        "violations.csv": "trial,scenario,value,lower,upper,gain_a,alpha,beta",
        "alignment.csv": "alpha,loss_aligned,loss_unaligned",
        "runs.csv": "cell_id,axis,value,seed,agent,market_loss,out_of_market_loss,relative_improvement",
    }
    columns = {
        "trades.csv": artifacts.TRADE_COLUMNS,
        "curves.csv": artifacts.CURVE_COLUMNS,
        "violations.csv": artifacts.VIOLATION_COLUMNS,
        "alignment.csv": artifacts.ALIGNMENT_COLUMNS,
        "runs.csv": artifacts.RUN_COLUMNS,
    }
    for name, header in expected.items():
        path = artifacts.write_csv(artifacts.frame([], columns[name]), tmp_path / name)
        assert path.read_text(encoding="utf-8") == header + "\n"


def test_csv_keeps_full_precision(tmp_path):
    """Test that floats are written with 17 significant digits and LF endings."""
    data = artifacts.frame([{"alpha": 0.1, "loss_aligned": 1.0 / 3.0, "loss_unaligned": 2.0}], artifacts.ALIGNMENT_COLUMNS)
    raw = artifacts.write_csv(data, tmp_path / "alignment.csv").read_bytes()
    assert b"\r" not in raw
    row = raw.decode("utf-8").splitlines()[1].split(",")
    assert row[0] == "0.10000000000000001"
    # Check the written text parses back to the same double
    assert float(row[1]) == 1.0 / 3.0


def test_write_json_spells_non_finite_values(tmp_path):
    """Test that infinities become strings and nesting is preserved."""
    path = artifacts.write_json({"gain": float("inf"), "nested": {"values": [1.5, float("-inf")]}}, tmp_path / "summary.json")
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload == {"gain": "inf", "nested": {"values": [1.5, "-inf"]}}


def test_write_creates_parent_directories(tmp_path):
    """Test that missing output directories are created."""
    path = artifacts.write_json({"ok": True}, tmp_path / "deep" / "nested" / "out.json")
    assert path.exists()


def test_failed_write_leaves_target_untouched(tmp_path):
    """Test that an interrupted write keeps the previous file and no temporary."""
    target = tmp_path / "summary.json"
    target.write_text("previous", encoding="utf-8")

    def explode(temporary):
        with open(temporary, "w", encoding="utf-8") as f:
            f.write("partial")
        raise RuntimeError("disk full")

    with pytest.raises(RuntimeError):
        artifacts._atomic_write(target, explode)
    assert target.read_text(encoding="utf-8") == "previous"
    assert [p.name for p in tmp_path.iterdir()] == ["summary.json"]


def test_trades_and_curves_frames(market_config):
    """Test the frames built from a short run."""
    config = market_config(rounds=3, pricing=True)
    log = engine.run_simulation(config)

    trades = artifacts.trades_frame(log)
    assert list(trades.columns) == artifacts.TRADE_COLUMNS
    assert len(trades) == len(log.trades)
    assert set(trades["gain_kind"]) == {config.gain_kind.value}

    curves = artifacts.curves_frame(log)
    assert list(curves.columns) == artifacts.CURVE_COLUMNS
    assert len(curves) == (config.rounds + 1) * len(config.agents)
    # Check round 0 comes first
    assert list(curves["round"][: len(config.agents)]) == [0] * len(config.agents)
