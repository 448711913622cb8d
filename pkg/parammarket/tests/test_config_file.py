"""
Tests for run configuration files.

This module contains tests for parsing market and sweep files and for the
line and field reported with every schema error.
"""

from pathlib import Path

import pytest

from parammarket.exceptions import ConfigError
from parammarket.models.config import SweepAxis, TaskFamily
from parammarket.models.market import Policy
from parammarket.utils.config_file import (
    is_sweep_file,
    load_market_config,
    load_sweep_config,
    parse_market_config,
    parse_sweep_config,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

MARKET = """\
[market]
seed = 3
rounds = 20
dim = 5

[agent.b]
n = 30
noise = 0.5

[agent.a]
n = 10
policy = always-trade   # inline comment

[broker]
n = 100
"""


def test_parse_market_config():
    """Test a valid market file."""
    config = parse_market_config(MARKET)
    assert config.seed == 3
    assert config.rounds == 20
    assert config.broker.n == 100
    # Check agents are ordered by id
    assert [a.id for a in config.agents] == ["a", "b"]
    assert config.agent("a").policy == Policy.ALWAYS_TRADE
    assert config.agent("b").noise == 0.5


def test_unknown_key_reports_line_and_field():
    """Test that a misspelt key names its section and line."""
    text = MARKET.replace("rounds = 20", "round = 20")
    with pytest.raises(ConfigError) as excinfo:
        parse_market_config(text)
    assert excinfo.value.field == "market.round"
    assert excinfo.value.line == 3


def test_invalid_value_reports_line_and_field():
    """Test that a schema violation names its key."""
    with pytest.raises(ConfigError) as excinfo:
        parse_market_config(MARKET.replace("rounds = 20", "rounds = 0"))
    assert excinfo.value.field == "market.rounds"
    assert excinfo.value.line == 3


def test_invalid_agent_value_reports_agent_section():
    """Test errors inside an agent block."""
    with pytest.raises(ConfigError) as excinfo:
        parse_market_config(MARKET.replace("[agent.a]\nn = 10", "[agent.a]\nn = -1"))
    assert excinfo.value.field == "agent.a.n"
    assert excinfo.value.line == 11


def test_cross_field_error():
    """Test a model-level error on the market."""
    text = MARKET.replace("[agent.a]\nn = 10", "[agent.a]\nn = 10\ndim = 7")
    with pytest.raises(ConfigError) as excinfo:
        parse_market_config(text)
    assert "dim" in excinfo.value.message


@pytest.mark.parametrize(
    "text, message",
    [
        (MARKET + "\n[extra]\nkey = 1\n", "unknown section"),
        (MARKET.replace("dim = 5", "dim = 5\ndim = 6"), "duplicate key"),
        ("seed = 1\n" + MARKET, "outside of any section"),
        (MARKET.replace("[market]", "[broker2]"), "missing [market]"),
        ("[market]\nseed = 0\n", "no [agent"),
    ],
)
def test_structural_errors(text, message):
    """Test malformed files."""
    with pytest.raises(ConfigError) as excinfo:
        parse_market_config(text)
    assert message in str(excinfo.value)


def test_single_agent_is_rejected():
    """Test that a market needs two agents."""
    text = "[market]\ndim = 3\n\n[agent.a]\nn = 5\n"
    with pytest.raises(ConfigError) as excinfo:
        parse_market_config(text)
    assert excinfo.value.field == "market.agents"


def test_parse_sweep_config_layers():
    """Test '|' separated layer sets."""
    text = (
        "[sweep]\naxis = layers\nvalues = 0 | 0,1\nseeds = 2\n\n"
        "[market]\ntask = mlp\ngain_kind = loss-difference\n\n"
        "[agent.a]\nn = 10\n\n[agent.b]\nn = 10\n\n[mlp]\nhidden_layers = 1\nlayer_set = 0, 1\n"
    )
    sweep = parse_sweep_config(text)
    assert sweep.axis == SweepAxis.LAYERS
    assert sweep.values == ["0", "0,1"]
    assert sweep.market.task == TaskFamily.MLP
    assert sweep.market.mlp.layer_set == [0, 1]


def test_sweep_unknown_key():
    """Test that sweep keys are checked too."""
    text = "[sweep]\naxis = distance\nvalue = 1\n\n" + MARKET
    with pytest.raises(ConfigError) as excinfo:
        parse_sweep_config(text)
    assert excinfo.value.field == "sweep.value"
    assert excinfo.value.line == 3


def test_missing_file():
    """Test that an unreadable path is a configuration error."""
    with pytest.raises(ConfigError):
        load_market_config(CONFIG_DIR / "does-not-exist.cfg")


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    """Test that every bundled configuration validates."""
    if is_sweep_file(path):
        sweep = load_sweep_config(path)
        assert sweep.axis == SweepAxis.SEED or sweep.values
    else:
        config = load_market_config(path)
        assert len(config.agents) >= 2


def test_reference_market_config_matches_readme():
    """Test the reference market used in the README's simulate example."""
    config = load_market_config(CONFIG_DIR / "paper_linear.cfg")
    assert config.dim == 1000
    assert [agent.n for agent in config.agents] == [500, 800]
    assert config.broker.n == 10000
