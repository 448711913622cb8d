"""
Market models.

This module defines the Pydantic models exchanged between the broker, the
pricing rules and the engine: merge proposals, gain reports, bounds,
valuations, priors and trade records.
"""

import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from parammarket.models.core import ParameterVector


class GainKind(str, Enum):
    """Gain-from-trade notion."""
    LOSS_DIFFERENCE = "loss-difference"
    ERROR_RATIO = "error-ratio"


class Policy(str, Enum):
    """Agent trading policy."""
    TRADE_WHEN_BENEFICIAL = "trade-when-beneficial"
    NEVER_TRADE = "never-trade"
    ALWAYS_TRADE = "always-trade"
    ASYNCHRONOUS = "asynchronous"
    FEDAVG = "fedavg"


class BoundScenario(str, Enum):
    """Quantity bounded by a GainBounds interval."""
    BUYER_GAIN = "buyer-gain"
    NO_BUY_NO_SELL = "no-buy-no-sell"
    BUY_NO_SELL = "buy-no-sell"
    NO_BUY_SELL = "no-buy-sell"
    BUY_SELL = "buy-sell"


class PriorKind(str, Enum):
    """Family of a valuation prior."""
    UNIFORM = "uniform"
    EXPONENTIAL = "exponential"
    LOGNORMAL = "lognormal"


class SellerValuation(str, Enum):
    """How a seller prices its parameters in competitive mode."""
    MYERSON = "myerson"
    LOWER_BOUND = "lower-bound"
    TRUTHFUL = "truthful"


class GainReport(BaseModel):
    """Gain-from-trade reported confidentially to one buyer."""
    model_config = ConfigDict(frozen=True)

    kind: GainKind = Field(..., description="Loss difference or error ratio")
    value: float = Field(..., description="Gain value, +inf for a perfect merge")
    trade_beneficial: bool = Field(..., description="Whether buying improves the buyer")

    @model_validator(mode="after")
    def validate_beneficial(self):
        """Validate the beneficial flag against the kind's threshold."""
        threshold = 0.0 if self.kind == GainKind.LOSS_DIFFERENCE else 1.0
        if self.trade_beneficial != (self.value > threshold):
            raise ValueError(f"trade_beneficial must equal value > {threshold} for {self.kind.value}")
        return self

    @classmethod
    def of(cls, kind: GainKind, value: float) -> "GainReport":
        threshold = 0.0 if kind == GainKind.LOSS_DIFFERENCE else 1.0
        return cls(kind=kind, value=value, trade_beneficial=value > threshold)


class MergeProposal(BaseModel):
    """Broker's try-before-purchase result for one directed pair."""
    model_config = ConfigDict(frozen=True)

    weight: float = Field(..., description="Seller's share in the merge", gt=0.0, le=1.0)
    merged: ParameterVector = Field(..., description="Merged parameters")
    broker_loss_before: float = Field(..., description="Broker loss of the buyer's parameters", ge=0.0)
    broker_loss_after: float = Field(..., description="Broker loss of the merged parameters", ge=0.0)


class GainBounds(BaseModel):
    """Interval on a counterparty's gain or performance ratio."""
    model_config = ConfigDict(frozen=True)

    lower: float = Field(..., description="Lower endpoint", ge=0.0)
    upper: float = Field(..., description="Upper endpoint, +inf when unbounded")
    scenario: BoundScenario = Field(..., description="Bounded quantity")
    clamped: bool = Field(False, description="Lower numerator was negative and clamped to 0")

    @model_validator(mode="after")
    def validate_order(self):
        """Validate that lower <= upper when upper is finite."""
        if math.isfinite(self.upper) and self.lower > self.upper:
            raise ValueError(f"lower {self.lower!r} exceeds upper {self.upper!r}")
        return self

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.upper)

    def contains(self, value: float, slack: float = 0.0) -> bool:
        """Membership with relative slack on both endpoints."""
        low = self.lower * (1.0 - slack)
        if not self.bounded:
            return value >= low
        return low <= value <= self.upper * (1.0 + slack)


class ValuationQuadruple(BaseModel):
    """Both agents' valuations of both parameter sets."""
    model_config = ConfigDict(frozen=True)

    v_a_self: float = Field(..., description="A's valuation of its own parameters")
    v_b_of_a: float = Field(..., description="B's valuation of A's parameters")
    v_b_self: float = Field(..., description="B's valuation of its own parameters")
    v_a_of_b: float = Field(..., description="A's valuation of B's parameters")

    @field_validator("v_a_self", "v_b_of_a", "v_b_self", "v_a_of_b")
    @classmethod
    def validate_finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("valuations must be finite")
        return value


class PriorDistribution(BaseModel):
    """Prior over a buyer's valuation."""
    model_config = ConfigDict(frozen=True)

    kind: PriorKind = Field(..., description="Distribution family")
    lo: float = Field(0.0, description="Uniform lower end", ge=0.0)
    hi: float = Field(1.0, description="Uniform upper end", ge=0.0)
    rate: float = Field(1.0, description="Exponential rate", gt=0.0)
    mu: float = Field(0.0, description="Lognormal log-mean")
    sigma: float = Field(1.0, description="Lognormal log-standard-deviation", gt=0.0)

    @model_validator(mode="after")
    def validate_support(self):
        """Validate that a uniform support is not reversed."""
        if self.kind == PriorKind.UNIFORM and self.hi < self.lo:
            raise ValueError(f"uniform prior needs hi >= lo, got lo={self.lo!r}, hi={self.hi!r}")
        return self


class Settlement(BaseModel):
    """Single-line record printed by the `price` command."""
    buyer_valuation: Optional[float] = Field(None, description="Buyer's quote")
    seller_valuation: Optional[float] = Field(None, description="Seller's quote")
    payment: Optional[float] = Field(None, description="Midpoint payment, absent when no trade")
    traded: Optional[bool] = Field(None, description="Whether the quotes cross")
    price_difference: Optional[float] = Field(None, description="Nash price difference P_a − P_b")
    price_a: Optional[float] = Field(None, description="Midpoint price of A's parameters")
    price_b: Optional[float] = Field(None, description="Midpoint price of B's parameters")
    revenue: Optional[float] = Field(None, description="Surplus product at the Nash difference")
    myerson_price: Optional[float] = Field(None, description="Myerson price of the prior")


class TradeRecord(BaseModel):
    """One buyer's decision in one round."""
    model_config = ConfigDict(frozen=True)

    round: int = Field(..., description="Round index", ge=1)
    buyer: str = Field(..., description="Buyer id")
    seller: str = Field(..., description="Seller id")
    merge_weight: float = Field(..., description="Seller's share in the proposed merge", gt=0.0, le=1.0)
    gain: GainReport = Field(..., description="Buyer's gain report")
    buyer_valuation: Optional[float] = Field(None, description="Buyer's quote")
    seller_valuation: Optional[float] = Field(None, description="Seller's quote")
    payment: Optional[float] = Field(None, description="Settled payment, absent when no trade")
    indicator: bool = Field(..., description="Whether the buyer ends the round with the merge")

    @model_validator(mode="after")
    def validate_indicator(self):
        """Validate that a payment is present exactly when the trade executes."""
        if self.indicator != (self.payment is not None):
            raise ValueError("indicator must be true exactly when a payment is present")
        return self


class Transfer(BaseModel):
    """Money moving between two agents in one round."""
    model_config = ConfigDict(frozen=True)

    round: int = Field(..., description="Round index", ge=1)
    payer: str = Field(..., description="Agent paying")
    payee: str = Field(..., description="Agent receiving")
    amount: float = Field(..., description="Signed amount received by the payee")


class AgentCurvePoint(BaseModel):
    """Per-round state of one agent."""
    model_config = ConfigDict(frozen=True)

    round: int = Field(..., description="Round index, 0 is the initial state", ge=0)
    agent: str = Field(..., description="Agent id")
    broker_loss: float = Field(..., description="Loss on the broker's validation data")
    own_loss: float = Field(..., description="Loss on the agent's own data")
    est_error: Optional[float] = Field(None, description="‖θ − θ*‖², linear tasks only")
    cum_payment: float = Field(..., description="Money received minus money paid so far")
    local_own_loss: Optional[float] = Field(None, description="Own loss after the local step, before trading")
    grad_norm: float = Field(..., description="Norm of the own-loss gradient at the final parameters")
