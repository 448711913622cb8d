"""
Pricing service.

This module provides the valuation and settlement rules of the market: the
Nash-bargaining price difference, Myerson's revenue-maximising price under a
prior, the seller's virtual valuation of a buyer's gain and the midpoint
payment of a single round.
"""

import logging
import math
from typing import Optional, Tuple

from scipy import stats
from scipy.optimize import minimize_scalar

from parammarket.exceptions import DomainError
from parammarket.models.market import PriorDistribution, PriorKind, ValuationQuadruple
from parammarket.services.bounds import buyer_gain_bounds

logger = logging.getLogger(__name__)

TAIL_MASS = 1e-12
PRICE_TOLERANCE = 1e-10
LOGNORMAL_SIGMA = 0.5


def nash_price_difference(q: ValuationQuadruple) -> float:
    """
    Price difference P_a − P_b maximising the product of both surpluses.

    Returns:
        ½(v_b(θ̇_a) + v_a(θ̇_a) − v_a(θ̇_b) − v_b(θ̇_b)), the net transfer A receives
    """
    return 0.5 * (q.v_b_of_a + q.v_a_self - q.v_a_of_b - q.v_b_self)


def nash_prices(q: ValuationQuadruple) -> Tuple[float, float]:
    """
    Per-parameter prices split at the midpoints of the feasible intervals.

    Only the difference is pinned by the bargaining problem; these prices are
    reported for logging and their difference equals nash_price_difference.
    """
    return 0.5 * (q.v_a_self + q.v_b_of_a), 0.5 * (q.v_b_self + q.v_a_of_b)


def cobb_douglas_revenue(q: ValuationQuadruple, delta_p: float) -> float:
    """Product U_a·U_b of both surpluses when P_a − P_b = delta_p."""
    surplus_a = delta_p - q.v_a_self + q.v_a_of_b
    surplus_b = -delta_p - q.v_b_self + q.v_b_of_a
    return surplus_a * surplus_b


def _frozen_distribution(prior: PriorDistribution):
    if prior.kind == PriorKind.UNIFORM:
        return stats.uniform(loc=prior.lo, scale=prior.hi - prior.lo)
    if prior.kind == PriorKind.EXPONENTIAL:
        return stats.expon(scale=1.0 / prior.rate)
    return stats.lognorm(s=prior.sigma, scale=math.exp(prior.mu))


def expected_revenue(prior: PriorDistribution, price: float) -> float:
    """P·(1 − F(P)) for a posted price P."""
    return price * float(_frozen_distribution(prior).sf(price))


def myerson_price_numeric(prior: PriorDistribution) -> float:
    """
    Maximise the expected revenue by bounded search over the support.

    Unbounded supports are truncated at the 1 − 1e-12 quantile. The support
    ends are compared with the search result so endpoint optima are exact.
    """
    if prior.kind == PriorKind.UNIFORM:
        if prior.hi == prior.lo:
            return prior.lo
        low, high = prior.lo, prior.hi
    else:
        low, high = 0.0, float(_frozen_distribution(prior).ppf(1.0 - TAIL_MASS))

    def objective(price: float) -> float:
        return -expected_revenue(prior, price)

    result = minimize_scalar(
        objective, bounds=(low, high), method="bounded",
        options={"xatol": PRICE_TOLERANCE * max(high - low, 1.0)},
    )
    best = min((low, float(result.x), high), key=objective)
    logger.debug(f"Numeric Myerson price {best!r} for {prior.kind.value} prior")
    return best


def myerson_price(prior: PriorDistribution) -> float:
    """
    Posted price maximising P·(1 − F(P)) under the prior.

    Uniform and exponential priors use their closed forms, the lognormal prior
    the numeric search.

    Args:
        prior: Distribution of the buyer's valuation

    Returns:
        Revenue-maximising price, the lower end for a degenerate uniform support
    """
    if prior.kind == PriorKind.UNIFORM:
        if prior.hi == prior.lo:
            return prior.lo
        return min(max(prior.hi / 2.0, prior.lo), prior.hi)
    if prior.kind == PriorKind.EXPONENTIAL:
        return 1.0 / prior.rate
    return myerson_price_numeric(prior)


def interval_prior(lower: float, upper: float, kind: PriorKind) -> PriorDistribution:
    """
    Prior of the given family fitted to a finite valuation interval.

    Exponential and lognormal priors are centred on the interval midpoint.
    """
    midpoint = 0.5 * (lower + upper)
    if kind == PriorKind.UNIFORM:
        return PriorDistribution(kind=kind, lo=lower, hi=upper)
    if midpoint <= 0:
        raise DomainError(f"interval [{lower!r}, {upper!r}] has no positive midpoint")
    if kind == PriorKind.EXPONENTIAL:
        return PriorDistribution(kind=kind, rate=1.0 / midpoint)
    return PriorDistribution(kind=kind, mu=math.log(midpoint), sigma=LOGNORMAL_SIGMA)


def seller_virtual_valuation(
    gain_a: float,
    alpha: float,
    beta: float,
    prior_kind: PriorKind = PriorKind.UNIFORM,
) -> float:
    """
    Seller's estimate of the buyer's willingness to pay for its parameters.

    Args:
        gain_a: Seller's own error-ratio gain
        alpha: Seller's purchased weight
        beta: Buyer's purchased weight
        prior_kind: Prior family placed on the bounds interval

    Returns:
        Myerson price clamped into the buyer-gain interval, or the lower bound
        when the interval is unbounded

    Raises:
        DomainError: Propagated from the bounds
    """
    bounds = buyer_gain_bounds(gain_a, alpha, beta)
    if not bounds.bounded:
        return bounds.lower
    if bounds.upper == bounds.lower:
        return bounds.lower
    price = myerson_price(interval_prior(bounds.lower, bounds.upper, prior_kind))
    return min(max(price, bounds.lower), bounds.upper)


def settle(buyer_valuation: float, seller_valuation: float) -> Optional[float]:
    """
    Midpoint payment when the buyer values the parameters at least as much.

    Returns:
        Payment in [seller_valuation, buyer_valuation], or None when negotiation fails
    """
    if buyer_valuation < seller_valuation:
        return None
    payment = 0.5 * (buyer_valuation + seller_valuation)
    return min(max(payment, seller_valuation), buyer_valuation)
