"""
Market log models.

This module defines the log a simulation produces and the reports derived
from it.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from parammarket.models.config import MarketConfig
from parammarket.models.market import AgentCurvePoint, TradeRecord, Transfer


class MarketLog(BaseModel):
    """Everything a simulation records, round by round."""
    config: MarketConfig = Field(..., description="Resolved configuration")
    step_sizes: Dict[str, float] = Field(..., description="Learning rate per agent")
    broker_floor: Dict[str, float] = Field(..., description="Broker loss of each agent's θ*, 0 when unknown")
    condition_numbers: Dict[str, float] = Field(default_factory=dict, description="ρ of always-trading linear agents with a full-rank design")
    curves: List[AgentCurvePoint] = Field(default_factory=list, description="Per-round per-agent state")
    trades: List[TradeRecord] = Field(default_factory=list, description="Per-round buyer decisions")
    transfers: List[Transfer] = Field(default_factory=list, description="Booked money transfers")

    def curve(self, agent: str) -> List[AgentCurvePoint]:
        return [point for point in self.curves if point.agent == agent]

    def final(self, agent: str) -> AgentCurvePoint:
        return self.curve(agent)[-1]


class ConvergenceReport(BaseModel):
    """First round at which each agent's metric falls below epsilon."""
    epsilon: float = Field(..., description="Threshold")
    metric: str = Field(..., description="Thresholded quantity")
    rounds: Dict[str, Optional[int]] = Field(..., description="First round per agent, None if never reached")


class DecayReport(BaseModel):
    """Check of the per-round loss decay factor of an always-trading agent."""
    applicable: bool = Field(..., description="Whether the log qualifies for the check")
    reason: Optional[str] = Field(None, description="Why the check was skipped")
    agent: Optional[str] = Field(None, description="Checked agent")
    rho: Optional[float] = Field(None, description="Condition number used")
    checked_rounds: int = Field(0, description="Trading rounds examined")
    violations: List[int] = Field(default_factory=list, description="Rounds breaking an upper bound")
    lower_violations: List[int] = Field(default_factory=list, description="Rounds whose merged loss falls below the lower bound")
    max_factor: Optional[float] = Field(None, description="Largest loss_t / loss_{t-1} observed")
    max_bound_ratio: Optional[float] = Field(None, description="Largest observed factor divided by its bound")
    max_merge_factor: Optional[float] = Field(None, description="Largest post/pre merge loss ratio observed")
    min_merge_factor: Optional[float] = Field(None, description="Smallest post/pre merge loss ratio observed")

    @property
    def passed(self) -> bool:
        return not self.applicable or not (self.violations or self.lower_violations)
