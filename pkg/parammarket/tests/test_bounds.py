"""
Tests for the valuation bounds service.

This module contains tests for the buyer-gain interval, the four
performance-ratio intervals and the randomised soundness check.
"""

import math

import numpy as np
import pytest

from parammarket.exceptions import DomainError
from parammarket.models.market import BoundScenario
from parammarket.services import bounds


def test_full_swap_collapses_buyer_gain():
    """Test that α = β = 1 pins the buyer's gain to 1/Δ_a."""
    interval = bounds.buyer_gain_bounds(4.0, 1.0, 1.0)
    assert interval.lower == pytest.approx(0.25)
    assert interval.upper == pytest.approx(0.25)
    assert interval.scenario == BoundScenario.BUYER_GAIN


def test_zero_upper_denominator_is_unbounded():
    """Test the +inf upper end when the denominator vanishes."""
    interval = bounds.buyer_gain_bounds(1.0, 0.5, 0.5)
    assert interval.lower == pytest.approx(0.25)
    assert math.isinf(interval.upper)
    assert not interval.bounded


def test_negative_lower_numerator_is_clamped():
    """Test that a large seller gain clamps the lower end to zero."""
    interval = bounds.buyer_gain_bounds(100.0, 0.5, 0.5)
    assert interval.lower == 0.0
    assert interval.clamped


@pytest.mark.parametrize(
    "gain_a, alpha, beta",
    [(0.0, 0.5, 0.5), (-1.0, 0.5, 0.5), (float("inf"), 0.5, 0.5), (1.0, 0.0, 0.5), (1.0, 0.5, 1.5)],
)
def test_buyer_gain_bounds_domain(gain_a, alpha, beta):
    """Test argument validation."""
    with pytest.raises(DomainError):
        bounds.buyer_gain_bounds(gain_a, alpha, beta)


def test_no_buy_no_sell_collapses_at_full_weight():
    """Test the collapsed interval for α = 1."""
    interval = bounds.perf_ratio_bounds(BoundScenario.NO_BUY_NO_SELL, 4.0, 1.0)
    assert (interval.lower, interval.upper) == (pytest.approx(0.25), pytest.approx(0.25))


def test_buy_no_sell_scales_by_seller_gain():
    """Test that dividing by the merged error multiplies both ends by Δ_a."""
    interval = bounds.perf_ratio_bounds(BoundScenario.BUY_NO_SELL, 4.0, 1.0)
    assert (interval.lower, interval.upper) == (pytest.approx(1.0), pytest.approx(1.0))
    plain = bounds.perf_ratio_bounds(BoundScenario.NO_BUY_SELL, 2.0, 0.6, 0.3)
    bought = bounds.perf_ratio_bounds(BoundScenario.BUY_SELL, 2.0, 0.6, 0.3)
    assert bought.lower == pytest.approx(2.0 * plain.lower)
    assert bought.upper == pytest.approx(2.0 * plain.upper)


def test_sell_scenarios_need_beta():
    """Test that β is required when the buyer merged."""
    with pytest.raises(DomainError):
        bounds.perf_ratio_bounds(BoundScenario.NO_BUY_SELL, 2.0, 0.5)
    with pytest.raises(DomainError):
        bounds.perf_ratio_bounds(BoundScenario.BUYER_GAIN, 2.0, 0.5)


def test_buyer_gain_scenario_delegates():
    """Test that the buyer-gain scenario matches buyer_gain_bounds."""
    assert bounds.perf_ratio_bounds(BoundScenario.BUYER_GAIN, 2.0, 0.4, 0.7) == bounds.buyer_gain_bounds(2.0, 0.4, 0.7)


def test_realized_ratios_match_definitions():
    """Test the realized quantities of a hand-built pair."""
    theta_star = np.zeros(1)
    ratios = bounds.realized_ratios(np.array([2.0]), np.array([-1.0]), theta_star, 0.5, 0.5)
    # Check both merges land at 0.5
    assert ratios["gain_a"] == pytest.approx(16.0)
    assert ratios[BoundScenario.BUYER_GAIN.value] == pytest.approx(4.0)
    assert ratios[BoundScenario.NO_BUY_NO_SELL.value] == pytest.approx(0.25)


def test_realized_values_fall_inside_bounds():
    """Test containment on random merges in three dimensions."""
    rng = np.random.default_rng(3)
    for _ in range(500):
        theta_star = rng.standard_normal(3)
        theta_a = theta_star + rng.standard_normal(3)
        theta_b = theta_star + rng.standard_normal(3)
        alpha, beta = rng.uniform(0.05, 1.0, size=2)
        ratios = bounds.realized_ratios(theta_a, theta_b, theta_star, alpha, beta)
        for scenario in BoundScenario:
            interval = bounds.perf_ratio_bounds(scenario, ratios["gain_a"], alpha, beta)
            assert interval.contains(ratios[scenario.value], bounds.SOUNDNESS_SLACK)


def test_check_soundness_finds_no_violation():
    """Test the full randomised sweep at its default size."""
    report = bounds.check_soundness(trials=10_000, seed=0)
    assert report.sound
    assert report.trials == 10_000
    assert sum(report.checked.values()) > 0
    # Check the sweep exercised the clamp and the unbounded case
    assert report.clamped[BoundScenario.BUYER_GAIN.value] > 0
    assert report.unbounded > 0


def test_check_soundness_is_deterministic():
    """Test that a seed fixes the report."""
    assert bounds.check_soundness(trials=200, seed=5) == bounds.check_soundness(trials=200, seed=5)
