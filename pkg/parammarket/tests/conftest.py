import numpy as np
import pytest

from parammarket.models.config import MarketConfig
from parammarket.models.core import LabeledDataset, ParameterVector
from parammarket.services import linear_task, mlp_align


@pytest.fixture
def rng():
    """Seeded generator shared by a test."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_task(rng):
    """Noisy linear task with d=5 and n=30."""
    theta_star = linear_task.draw_theta_star(5, 1.0, rng)
    return linear_task.synthesize_task(5, 30, 0.1, theta_star, rng)


@pytest.fixture
def broker_data(small_task, rng):
    """Noiseless validation data for the task of small_task."""
    inputs = rng.standard_normal((200, 5))
    return LabeledDataset(inputs=inputs, labels=inputs @ small_task.true_params.values)


@pytest.fixture
def tiny_mlp(rng):
    """2-8-8-2 network."""
    return mlp_align.init_mlp((2, 8, 8, 2), rng)


@pytest.fixture
def vector():
    """Build a ParameterVector from a list."""
    def build(values):
        return ParameterVector(values=values)
    return build


def make_config(**overrides) -> MarketConfig:
    """Small two-agent linear market; keyword arguments override [market] fields."""
    agents = overrides.pop("agents", None) or [
        {"id": "a", "n": 15, "noise": 0.5},
        {"id": "b", "n": 25, "noise": 0.5},
    ]
    payload = {
        "seed": 0,
        "rounds": 15,
        "dim": 10,
        "broker": {"n": 300},
        "agents": agents,
        **overrides,
    }
    return MarketConfig.model_validate(payload)


@pytest.fixture
def market_config():
    """Factory for small market configurations."""
    return make_config
