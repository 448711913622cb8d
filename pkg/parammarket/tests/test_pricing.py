"""
Tests for the pricing service.

This module contains tests for the Nash-bargaining difference, the Myerson
price under each prior, the seller's virtual valuation and settlement.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from parammarket.exceptions import DomainError
from parammarket.models.market import PriorDistribution, PriorKind, Settlement, ValuationQuadruple
from parammarket.services import pricing
from parammarket.services.bounds import buyer_gain_bounds


@pytest.fixture
def quadruple():
    """Asymmetric quadruple from the worked example."""
    return ValuationQuadruple(v_a_self=2.0, v_b_of_a=4.0, v_b_self=1.0, v_a_of_b=3.0)


def test_nash_price_difference_examples(quadruple):
    """Test the symmetric, asymmetric and truthful examples."""
    symmetric = ValuationQuadruple(v_a_self=2.0, v_b_of_a=3.0, v_b_self=2.0, v_a_of_b=3.0)
    assert pricing.nash_price_difference(symmetric) == 0.0
    assert pricing.nash_price_difference(quadruple) == 1.0
    truthful = ValuationQuadruple(v_a_self=5.0, v_b_of_a=5.0, v_b_self=3.0, v_a_of_b=3.0)
    assert pricing.nash_price_difference(truthful) == 2.0


def test_nash_prices_difference_matches(quadruple):
    """Test that the midpoint prices differ by the Nash difference."""
    price_a, price_b = pricing.nash_prices(quadruple)
    assert price_a - price_b == pytest.approx(pricing.nash_price_difference(quadruple))


def test_cobb_douglas_revenue_example(quadruple):
    """Test the surplus product at Δp = 1."""
    assert pricing.cobb_douglas_revenue(quadruple, 1.0) == 4.0


def test_nash_difference_maximises_revenue(rng):
    """Test the closed form against a grid over each quadruple's own bargaining interval."""
    for _ in range(1000):
        values = rng.uniform(0.0, 10.0, size=4)
        q = ValuationQuadruple(v_a_self=values[0], v_b_of_a=values[1], v_b_self=values[2], v_a_of_b=values[3])
        best = pricing.nash_price_difference(q)
        # A's surplus vanishes at one end, B's at the other
        ends = (q.v_a_self - q.v_a_of_b, q.v_b_of_a - q.v_b_self)
        low, high = min(ends), max(ends)
        grid = np.linspace(low, high, 10_001)
        step = grid[1] - grid[0]
        revenues = pricing.cobb_douglas_revenue(q, grid)
        assert low - 1e-12 <= best <= high + 1e-12
        assert pricing.cobb_douglas_revenue(q, best) >= revenues.max() - 1e-9
        assert abs(grid[np.argmax(revenues)] - best) <= step + 1e-12


def test_quadruple_rejects_non_finite():
    """Test that valuations must be finite."""
    with pytest.raises(ValidationError):
        ValuationQuadruple(v_a_self=float("inf"), v_b_of_a=1.0, v_b_self=1.0, v_a_of_b=1.0)


def test_myerson_closed_forms():
    """Test the uniform and exponential closed forms."""
    assert pricing.myerson_price(PriorDistribution(kind=PriorKind.UNIFORM, lo=0.0, hi=6.0)) == 3.0
    assert pricing.myerson_price(PriorDistribution(kind=PriorKind.EXPONENTIAL, rate=4.0)) == 0.25
    # Check the revenue is decreasing on [3, 4]
    assert pricing.myerson_price(PriorDistribution(kind=PriorKind.UNIFORM, lo=3.0, hi=4.0)) == 3.0
    assert pricing.myerson_price(PriorDistribution(kind=PriorKind.UNIFORM, lo=2.0, hi=2.0)) == 2.0


def test_uniform_prior_rejects_reversed_support():
    """Test that hi < lo is a validation error."""
    with pytest.raises(ValidationError):
        PriorDistribution(kind=PriorKind.UNIFORM, lo=2.0, hi=1.0)


def test_numeric_search_agrees_with_closed_forms(rng):
    """Test the numeric optimiser against the closed forms on random priors."""
    for _ in range(50):
        lo = rng.uniform(0.0, 5.0)
        prior = PriorDistribution(kind=PriorKind.UNIFORM, lo=lo, hi=lo + rng.uniform(0.1, 5.0))
        assert pricing.myerson_price_numeric(prior) == pytest.approx(pricing.myerson_price(prior), abs=1e-6)
    for _ in range(50):
        prior = PriorDistribution(kind=PriorKind.EXPONENTIAL, rate=rng.uniform(0.1, 10.0))
        assert pricing.myerson_price_numeric(prior) == pytest.approx(pricing.myerson_price(prior), rel=1e-5)


def test_lognormal_price_beats_grid():
    """Test the lognormal price against a dense revenue grid."""
    prior = PriorDistribution(kind=PriorKind.LOGNORMAL, mu=0.5, sigma=0.5)
    price = pricing.myerson_price(prior)
    grid = np.linspace(0.01, 10.0, 5000)
    best = max(pricing.expected_revenue(prior, p) for p in grid)
    assert pricing.expected_revenue(prior, price) >= best - 1e-9


def test_interval_prior_families():
    """Test the fitted families for an interval."""
    assert pricing.interval_prior(1.0, 3.0, PriorKind.UNIFORM) == PriorDistribution(kind=PriorKind.UNIFORM, lo=1.0, hi=3.0)
    assert pricing.interval_prior(1.0, 3.0, PriorKind.EXPONENTIAL).rate == 0.5
    assert pricing.interval_prior(1.0, 3.0, PriorKind.LOGNORMAL).mu == pytest.approx(np.log(2.0))
    with pytest.raises(DomainError):
        pricing.interval_prior(0.0, 0.0, PriorKind.EXPONENTIAL)


def test_seller_virtual_valuation_examples():
    """Test the point interval, the finite interval and the unbounded case."""
    assert pricing.seller_virtual_valuation(4.0, 1.0, 1.0) == pytest.approx(0.25)
    assert pricing.seller_virtual_valuation(1.0, 0.5, 0.5) == pytest.approx(0.25)
    assert pricing.myerson_price(pricing.interval_prior(1.0, 3.0, PriorKind.UNIFORM)) == 1.5


@pytest.mark.parametrize("kind", list(PriorKind))
def test_seller_virtual_valuation_stays_in_bounds(kind, rng):
    """Test that every prior family's price lies inside the bounds."""
    for _ in range(30):
        gain_a, alpha, beta = rng.uniform(0.5, 3.0), rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0)
        interval = buyer_gain_bounds(gain_a, alpha, beta)
        valuation = pricing.seller_virtual_valuation(gain_a, alpha, beta, kind)
        assert interval.lower <= valuation
        if interval.bounded:
            assert valuation <= interval.upper


def test_settle_examples():
    """Test the midpoint rule and failed negotiation."""
    assert pricing.settle(4.0, 2.0) == 3.0
    assert pricing.settle(2.0, 4.0) is None
    assert pricing.settle(5.0, 5.0) == 5.0


def test_settlement_serialises_without_absent_fields():
    """Test the one-line record printed by the price command."""
    line = Settlement(buyer_valuation=4.0, seller_valuation=2.0, payment=3.0, traded=True).model_dump_json(exclude_none=True)
    assert line == '{"buyer_valuation":4.0,"seller_valuation":2.0,"payment":3.0,"traded":true}'
