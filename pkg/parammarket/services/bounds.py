"""
Valuation bounds service.

This module provides the intervals a seller can compute from its own gain,
its purchased weight and the buyer's purchased weight alone: bounds on the
buyer's gain from trade and on the four error-ratio scenarios, plus the
randomised soundness check behind the `bounds-check` command.
"""

import logging
import math
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from parammarket.exceptions import DomainError
from parammarket.models.market import BoundScenario, GainBounds

logger = logging.getLogger(__name__)

DENOMINATOR_TOLERANCE = 1e-12
SOUNDNESS_SLACK = 1e-9


def _check_arguments(gain_a: float, alpha: float, beta: Optional[float]) -> None:
    if not (math.isfinite(gain_a) and gain_a > 0):
        raise DomainError(f"gain must be positive and finite, got {gain_a!r}")
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha!r}")
    if beta is not None and not 0.0 < beta <= 1.0:
        raise DomainError(f"beta must lie in (0, 1], got {beta!r}")


def buyer_gain_bounds(gain_a: float, alpha: float, beta: float) -> GainBounds:
    """
    Bound the buyer's error-ratio gain from the seller's side of the trade.

    The upper denominator takes the larger of the two reverse-triangle
    estimates of the buyer's merged error; when neither is positive the upper
    end is +inf.

    Args:
        gain_a: Seller's own error-ratio gain Δ_a
        alpha: Seller's purchased weight
        beta: Buyer's purchased weight

    Returns:
        GainBounds for the buyer-gain scenario

    Raises:
        DomainError: If gain_a <= 0 or a weight is outside (0, 1]
    """
    _check_arguments(gain_a, alpha, beta)
    root = math.sqrt(gain_a)
    cross = 1.0 - alpha - beta + 2.0 * alpha * beta

    numerator_low = 1.0 - root * (1.0 - alpha)
    clamped = numerator_low < 0
    if clamped:
        logger.debug(f"Lower numerator {numerator_low!r} clamped to 0 (gain={gain_a!r}, alpha={alpha!r})")
    lower = (max(numerator_low, 0.0) / ((1.0 - beta) + root * cross)) ** 2

    denominator_up = max((1.0 - beta) - root * cross, root * (alpha + beta - 1.0) - (1.0 - beta))
    if denominator_up <= DENOMINATOR_TOLERANCE:
        upper = math.inf
    else:
        upper = ((1.0 + root * (1.0 - alpha)) / denominator_up) ** 2
    return GainBounds(lower=lower, upper=max(upper, lower), scenario=BoundScenario.BUYER_GAIN, clamped=clamped)


def perf_ratio_bounds(
    scenario: BoundScenario,
    gain_a: float,
    alpha: float,
    beta: Optional[float] = None,
) -> GainBounds:
    """
    Bound the ratio of the buyer's estimation error to the seller's.

    no-buy-no-sell bounds ‖θ̇_b − θ*‖²/‖θ̇_a − θ*‖², no-buy-sell bounds
    ‖θ̄_b − θ*‖²/‖θ̇_a − θ*‖²; the buy variants divide by the seller's
    merged error instead, which multiplies both ends by Δ_a.

    Raises:
        DomainError: If arguments are out of range or β is missing for a sell scenario
    """
    if scenario == BoundScenario.BUYER_GAIN:
        if beta is None:
            raise DomainError("beta is required for the buyer-gain scenario")
        return buyer_gain_bounds(gain_a, alpha, beta)
    sells = scenario in (BoundScenario.NO_BUY_SELL, BoundScenario.BUY_SELL)
    if sells and beta is None:
        raise DomainError(f"beta is required for the {scenario.value} scenario")
    _check_arguments(gain_a, alpha, beta if sells else None)

    root = math.sqrt(gain_a)
    near = 1.0 / (alpha * root) - (1.0 - alpha) / alpha
    far = 1.0 / (alpha * root) + (1.0 - alpha) / alpha
    if sells:
        near = (1.0 - beta) * near - beta
        far = (1.0 - beta) * far + beta
    clamped = near < 0
    lower, upper = max(near, 0.0) ** 2, far ** 2

    if scenario in (BoundScenario.BUY_NO_SELL, BoundScenario.BUY_SELL):
        lower, upper = gain_a * lower, gain_a * upper
    return GainBounds(lower=lower, upper=upper, scenario=scenario, clamped=clamped)


class BoundsViolation(BaseModel):
    """A realized quantity outside its computed interval."""
    trial: int = Field(..., description="Trial index")
    scenario: BoundScenario = Field(..., description="Violated scenario")
    value: float = Field(..., description="Realized quantity")
    lower: float = Field(..., description="Lower bound")
    upper: float = Field(..., description="Upper bound")
    gain_a: float = Field(..., description="Seller gain")
    alpha: float = Field(..., description="Seller weight")
    beta: float = Field(..., description="Buyer weight")


class BoundsCheckReport(BaseModel):
    """Outcome of a randomised soundness sweep."""
    trials: int = Field(..., description="Constructed instances")
    seed: int = Field(..., description="Generator seed")
    slack: float = Field(..., description="Relative slack")
    checked: Dict[str, int] = Field(..., description="Checks per scenario")
    clamped: Dict[str, int] = Field(..., description="Clamped lower numerators per scenario")
    unbounded: int = Field(..., description="Buyer-gain intervals with an infinite upper end")
    violations: List[BoundsViolation] = Field(default_factory=list, description="Violations found")

    @property
    def sound(self) -> bool:
        return not self.violations


def realized_ratios(theta_a: np.ndarray, theta_b: np.ndarray, theta_star: np.ndarray, alpha: float, beta: float) -> Dict[str, float]:
    """Gains and error ratios of an actual pair of merges."""
    err_a = float(np.sum((theta_a - theta_star) ** 2))
    err_b = float(np.sum((theta_b - theta_star) ** 2))
    err_bar_a = float(np.sum(((1.0 - alpha) * theta_a + alpha * theta_b - theta_star) ** 2))
    err_bar_b = float(np.sum(((1.0 - beta) * theta_b + beta * theta_a - theta_star) ** 2))
    return {
        "gain_a": err_a / err_bar_a,
        BoundScenario.BUYER_GAIN.value: err_b / err_bar_b,
        BoundScenario.NO_BUY_NO_SELL.value: err_b / err_a,
        BoundScenario.BUY_NO_SELL.value: err_b / err_bar_a,
        BoundScenario.NO_BUY_SELL.value: err_bar_b / err_a,
        BoundScenario.BUY_SELL.value: err_bar_b / err_bar_a,
    }


def check_soundness(trials: int = 10_000, seed: int = 0, slack: float = SOUNDNESS_SLACK, max_dim: int = 8) -> BoundsCheckReport:
    """
    Construct random merges and test every interval against the realized value.

    Args:
        trials: Number of random (θ̇_a, θ̇_b, θ*, α, β) instances
        seed: Generator seed
        slack: Relative slack absorbing rounding
        max_dim: Largest parameter dimension drawn

    Returns:
        BoundsCheckReport listing any violations
    """
    rng = np.random.default_rng(seed)
    scenarios = list(BoundScenario)
    checked = {s.value: 0 for s in scenarios}
    clamped = {s.value: 0 for s in scenarios}
    unbounded = 0
    violations: List[BoundsViolation] = []

    for trial in range(trials):
        dim = int(rng.integers(1, max_dim + 1))
        theta_star = rng.standard_normal(dim)
        theta_a = theta_star + rng.standard_normal(dim) * rng.uniform(0.1, 3.0)
        theta_b = theta_star + rng.standard_normal(dim) * rng.uniform(0.1, 3.0)
        alpha = 1.0 - rng.uniform(0.0, 1.0)
        beta = 1.0 - rng.uniform(0.0, 1.0)
        ratios = realized_ratios(theta_a, theta_b, theta_star, alpha, beta)
        if not all(math.isfinite(v) and v > 0 for v in ratios.values()):
            continue

        for scenario in scenarios:
            bounds = perf_ratio_bounds(scenario, ratios["gain_a"], alpha, beta)
            value = ratios[scenario.value]
            checked[scenario.value] += 1
            clamped[scenario.value] += int(bounds.clamped)
            if scenario == BoundScenario.BUYER_GAIN and not bounds.bounded:
                unbounded += 1
            if not bounds.contains(value, slack):
                violations.append(BoundsViolation(
                    trial=trial, scenario=scenario, value=value, lower=bounds.lower, upper=bounds.upper,
                    gain_a=ratios["gain_a"], alpha=alpha, beta=beta,
                ))

    if violations:
        logger.warning(f"{len(violations)} bound violation(s) in {trials} trials")
    else:
        logger.info(f"All bounds held over {trials} trials")
    return BoundsCheckReport(
        trials=trials, seed=seed, slack=slack, checked=checked, clamped=clamped,
        unbounded=unbounded, violations=violations,
    )
