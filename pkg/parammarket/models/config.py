"""
Run configuration models.

This module defines the Pydantic models a run or sweep configuration file is
validated against. Every field carries its documented default.
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from parammarket.models.core import LossKind
from parammarket.models.market import GainKind, Policy, PriorKind, SellerValuation


class TaskFamily(str, Enum):
    """Model family traded in a market."""
    LINEAR = "linear"
    MLP = "mlp"


class InitKind(str, Enum):
    """Shared initial parameters θ⁰."""
    ZEROS = "zeros"
    NORMAL = "normal"


class ConvergenceMetric(str, Enum):
    """Quantity compared against epsilon by convergence_metrics."""
    EXCESS_LOSS = "excess-loss"
    GRADIENT_NORM = "gradient-norm"


class SweepAxis(str, Enum):
    """Knob varied across sweep cells."""
    DISTANCE = "distance"
    ENDOWMENT = "endowment"
    FREQUENCY = "frequency"
    START = "start"
    DELAY = "delay"
    LAYERS = "layers"
    SEED = "seed"


class AgentSpec(BaseModel):
    """One [agent.<id>] block."""
    id: str = Field(..., description="Agent id, also the tie-break order", min_length=1)
    n: Optional[int] = Field(None, description="Number of own samples, unused under a class endowment", ge=1)
    noise: float = Field(0.0, description="Label noise variance", ge=0.0)
    policy: Policy = Field(Policy.TRADE_WHEN_BENEFICIAL, description="Trading policy")
    delay: int = Field(0, description="Rounds an asynchronous agent waits before trading", ge=0)
    distance: float = Field(0.0, description="Distance of this agent's θ* from the base task", ge=0.0)
    dim: Optional[int] = Field(None, description="Parameter dimension, must match [market] dim", ge=1)
    step_size: Optional[float] = Field(None, description="Fixed learning rate, default step_scale / L", gt=0.0)


class BrokerSpec(BaseModel):
    """The [broker] block: the broker's validation data."""
    n: int = Field(1000, description="Number of validation samples", ge=1)
    noise: float = Field(0.0, description="Validation label noise variance", ge=0.0)


class MlpSpec(BaseModel):
    """The [mlp] block for two-moons markets."""
    hidden_layers: int = Field(3, description="Number of hidden layers", ge=1)
    width: int = Field(16, description="Units per hidden layer", ge=1)
    moons_noise: float = Field(0.1, description="Two-moons jitter", ge=0.0)
    step_size: float = Field(0.5, description="Learning rate for MLP agents", gt=0.0)
    warmup_epochs: int = Field(0, description="Local epochs before round 1", ge=0)
    init_scale: float = Field(1.0, description="He-initialization multiplier", gt=0.0)
    layer_set: Optional[List[int]] = Field(None, description="Layers merged in a trade, all when absent")
    align: bool = Field(True, description="Align the seller to the buyer before merging")
    sweeps: int = Field(10, description="Weight-matching coordinate-descent passes", ge=1)

    @field_validator("layer_set")
    @classmethod
    def validate_layer_set(cls, layer_set):
        if layer_set is not None and not layer_set:
            raise ValueError("layer_set must not be empty")
        return layer_set

    @model_validator(mode="after")
    def validate_layer_range(self):
        """Validate layer indices against the architecture."""
        if self.layer_set is not None:
            n_layers = self.hidden_layers + 1
            bad = [i for i in self.layer_set if not 0 <= i < n_layers]
            if bad:
                raise ValueError(f"layer indices {bad} outside 0..{n_layers - 1}")
        return self

    def architecture(self, n_inputs: int, n_outputs: int) -> Tuple[int, ...]:
        return (n_inputs,) + (self.width,) * self.hidden_layers + (n_outputs,)


class MarketConfig(BaseModel):
    """A complete simulation configuration."""
    seed: int = Field(0, description="Seed of the single generator driving the run", ge=0)
    rounds: int = Field(100, description="Number of rounds T", ge=1)
    task: TaskFamily = Field(TaskFamily.LINEAR, description="Model family")
    gain_kind: GainKind = Field(GainKind.ERROR_RATIO, description="Gain-from-trade notion")
    trade_every: int = Field(1, description="Trade every k rounds", ge=1)
    trade_start: int = Field(0, description="Trading opens after this round", ge=0)
    pricing: bool = Field(False, description="Competitive mode with payments")
    loss: LossKind = Field(LossKind.SUM_OF_SQUARES, description="Linear loss convention")
    dim: int = Field(1000, description="Parameter dimension d of linear tasks", ge=1)
    theta_scale: float = Field(1.0, description="Standard deviation of θ* entries", gt=0.0)
    init: InitKind = Field(InitKind.ZEROS, description="Shared initial parameters")
    step_scale: float = Field(0.9, description="Step size as a fraction of 1/L", gt=0.0, le=1.0)
    epsilon: float = Field(1.0, description="Convergence threshold reported in the summary", gt=0.0)
    convergence_metric: ConvergenceMetric = Field(ConvergenceMetric.EXCESS_LOSS, description="Thresholded quantity")
    seller_valuation: SellerValuation = Field(SellerValuation.MYERSON, description="Seller quote rule")
    prior_kind: PriorKind = Field(PriorKind.UNIFORM, description="Prior over the bounds interval")
    endowment: Optional[float] = Field(None, description="Class-endowment fraction, independent tasks when absent", gt=0.0, le=1.0)
    pool_per_class: int = Field(500, description="Rows per class in the endowment pool", ge=1)
    weight_floor: float = Field(1e-6, description="Smallest merge weight", gt=0.0, lt=1.0)
    compare_out_of_market: bool = Field(True, description="Also run the never-trade twin")
    agents: List[AgentSpec] = Field(..., description="Agent blocks")
    broker: BrokerSpec = Field(default_factory=BrokerSpec, description="Broker block")
    mlp: MlpSpec = Field(default_factory=MlpSpec, description="MLP block")

    @field_validator("agents")
    @classmethod
    def validate_agents(cls, agents):
        """Validate agent count and ids, and order agents by id."""
        if len(agents) < 2:
            raise ValueError("a market needs at least two agents")
        ids = [a.id for a in agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate agent ids in {ids}")
        return sorted(agents, key=lambda a: a.id)

    @model_validator(mode="after")
    def validate_combination(self):
        """Validate settings that depend on each other."""
        if self.endowment is None:
            missing = [a.id for a in self.agents if a.n is None]
            if missing:
                raise ValueError(f"agents {missing} need n without a class endowment")
        for agent in self.agents:
            if agent.dim is not None and agent.dim != self.dim:
                raise ValueError(f"agent {agent.id} has dim {agent.dim} but the market has dim {self.dim}")
        if self.task == TaskFamily.MLP:
            if self.gain_kind == GainKind.ERROR_RATIO:
                raise ValueError("error-ratio gains need θ*; use loss-difference for mlp markets")
            if any(a.distance for a in self.agents):
                raise ValueError("related-task distances apply to linear markets only")
        if (
            self.pricing
            and self.gain_kind == GainKind.LOSS_DIFFERENCE
            and self.seller_valuation != SellerValuation.TRUTHFUL
        ):
            raise ValueError("bound-based seller valuations need error-ratio gains; use seller_valuation = truthful")
        if self.endowment is not None and self.task == TaskFamily.LINEAR and self.dim < 2:
            raise ValueError("class endowment needs dim >= 2")
        return self

    def agent(self, agent_id: str) -> AgentSpec:
        for spec in self.agents:
            if spec.id == agent_id:
                return spec
        raise KeyError(agent_id)

    def out_of_market(self) -> "MarketConfig":
        """Twin configuration in which nobody trades."""
        agents = [a.model_copy(update={"policy": Policy.NEVER_TRADE}) for a in self.agents]
        return self.model_copy(update={"agents": agents, "compare_out_of_market": False})


class SweepConfig(BaseModel):
    """A [sweep] block on top of a base market."""
    axis: SweepAxis = Field(..., description="Knob varied across cells")
    values: List[str] = Field(default_factory=list, description="Axis values, '|' separated for layer sets")
    seeds: int = Field(5, description="Seeds per cell, offset from the base seed", ge=1)
    agent: Optional[str] = Field(None, description="Measured agent, first agent when absent")
    market: MarketConfig = Field(..., description="Base market")

    @model_validator(mode="after")
    def validate_values(self):
        """Validate axis values and the measured agent."""
        if self.axis != SweepAxis.SEED and not self.values:
            raise ValueError(f"axis {self.axis.value} needs values")
        if self.axis == SweepAxis.LAYERS and self.market.task != TaskFamily.MLP:
            raise ValueError("the layers axis needs task = mlp")
        for value in self.values:
            if self.axis == SweepAxis.LAYERS:
                [int(i) for i in value.split(",")]
            else:
                float(value)
        if self.agent is not None and self.agent not in {a.id for a in self.market.agents}:
            raise ValueError(f"unknown measured agent {self.agent!r}")
        return self

    @property
    def measured_agent(self) -> str:
        return self.agent if self.agent is not None else self.market.agents[0].id
