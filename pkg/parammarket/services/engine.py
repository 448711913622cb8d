"""
Market engine service.

This module runs the trading protocol as a round-driven state machine over
two or more agents: local gradient steps, broker try-before-purchase, gain
reports, optional pricing and the indicator rule that decides which
parameters each agent keeps. It also derives convergence and decay reports
from a finished log.
"""

import logging
import math
from fractions import Fraction
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from parammarket.exceptions import DivergenceError, DomainError, SingularMatrixError
from parammarket.models.config import ConvergenceMetric, InitKind, MarketConfig, TaskFamily
from parammarket.models.core import LabeledDataset, LossSpec, ParameterVector
from parammarket.models.linear import LinearTask
from parammarket.models.log import ConvergenceReport, DecayReport, MarketLog
from parammarket.models.market import (
    AgentCurvePoint,
    GainKind,
    GainReport,
    MergeProposal,
    Policy,
    SellerValuation,
    TradeRecord,
    Transfer,
    ValuationQuadruple,
)
from parammarket.models.mlp import MlpParams, MlpTask
from parammarket.services import linear_task, mlp_align
from parammarket.services.bounds import buyer_gain_bounds
from parammarket.services.broker import BrokerService, MlpBrokerService, fedavg_weight
from parammarket.services.core import empirical_loss, gradient, gradient_step
from parammarket.services.pricing import nash_price_difference, seller_virtual_valuation, settle

logger = logging.getLogger(__name__)

DECAY_SLACK = 1e-9
# booked amounts are multiples of 2**-32 so every partial sum of balances is exact
PAYMENT_SCALE = 2 ** 32

# (own gain report, seller's share in the proposed merge) -> buy?
DecisionRule = Callable[[GainReport, float], bool]


def trade_when_beneficial(gain: GainReport, weight: float) -> bool:
    return gain.trade_beneficial


def always_trade(gain: GainReport, weight: float) -> bool:
    return True


DEFAULT_RULES: Dict[Policy, DecisionRule] = {
    Policy.TRADE_WHEN_BENEFICIAL: trade_when_beneficial,
    Policy.ASYNCHRONOUS: trade_when_beneficial,
    Policy.ALWAYS_TRADE: always_trade,
    Policy.FEDAVG: always_trade,
}


class AgentState(BaseModel):
    """One agent between rounds."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str = Field(..., description="Agent id")
    params: ParameterVector = Field(..., description="Current parameters, flattened for MLPs")
    task: Union[LinearTask, MlpTask] = Field(..., description="Own data")
    step_size: float = Field(..., description="Learning rate", gt=0.0)
    policy: Policy = Field(..., description="Trading policy")
    delay: int = Field(0, description="Asynchronous trading delay", ge=0)

    @property
    def n_samples(self) -> int:
        return self.task.data.n_samples


class _Purchase(NamedTuple):
    buyer: str
    seller: str
    proposal: MergeProposal
    gain: GainReport
    buyer_valuation: Optional[float]
    seller_valuation: Optional[float]
    payment: Optional[float]


class RoundOutcome(NamedTuple):
    states: List[AgentState]
    trades: List[TradeRecord]
    transfers: List[Transfer]
    curves: List[AgentCurvePoint]


class MarketSimulator:
    """Deterministic simulator for one MarketConfig."""

    def __init__(
        self,
        config: MarketConfig,
        rules: Optional[Mapping[Policy, DecisionRule]] = None,
        brokers: Optional[Dict[str, BrokerService]] = None,
    ):
        """
        Initialize the simulator.

        Args:
            config: Validated market configuration
            rules: Decision rules overriding the defaults per policy
            brokers: Broker per agent id, built by setup() when omitted
        """
        self.config = config
        self.spec = LossSpec(kind=config.loss)
        self.rules: Dict[Policy, DecisionRule] = {**DEFAULT_RULES, **(rules or {})}
        self.brokers: Dict[str, BrokerService] = dict(brokers or {})
        self.ledger: Dict[str, Fraction] = {a.id: Fraction(0) for a in config.agents}
        self.shapes: Optional[Tuple[Tuple[int, int], ...]] = None

    # setup

    def setup(self) -> List[AgentState]:
        """
        Draw every task, the broker data and the initial parameters.

        All randomness comes from one generator seeded with config.seed and is
        consumed in a fixed order that does not depend on the policies.
        """
        rng = np.random.default_rng(self.config.seed)
        if self.config.task == TaskFamily.MLP:
            return self._setup_mlp(rng)
        return self._setup_linear(rng)

    def _setup_linear(self, rng: np.random.Generator) -> List[AgentState]:
        cfg = self.config
        base = linear_task.draw_theta_star(cfg.dim, cfg.theta_scale, rng)
        thetas = {a.id: linear_task.related_theta_star(base, a.distance, rng) for a in cfg.agents}

        if cfg.endowment is not None:
            pool = linear_task.synthesize_class_pool(cfg.dim, cfg.pool_per_class, rng)
            tasks = {
                a.id: linear_task.endowment_task(pool, index % 2, cfg.endowment, a.noise, thetas[a.id])
                for index, a in enumerate(cfg.agents)
            }
        else:
            tasks = {a.id: linear_task.synthesize_task(cfg.dim, a.n, a.noise, thetas[a.id], rng) for a in cfg.agents}

        broker_inputs = rng.standard_normal((cfg.broker.n, cfg.dim))
        broker_noise = np.sqrt(cfg.broker.noise) * rng.standard_normal(cfg.broker.n)
        if cfg.init == InitKind.NORMAL:
            init = ParameterVector(values=cfg.theta_scale * rng.standard_normal(cfg.dim))
        else:
            init = ParameterVector(values=np.zeros(cfg.dim))

        if not self.brokers:
            shared = LabeledDataset(inputs=broker_inputs, labels=broker_inputs @ base.values + broker_noise)
            by_task: List[BrokerService] = []
            for agent in cfg.agents:
                theta = thetas[agent.id]
                broker = next((b for b in by_task if b.theta_star == theta), None)
                if broker is None:
                    data = shared.with_labels(broker_inputs @ theta.values + broker_noise)
                    broker = BrokerService(data, self.spec, theta, cfg.weight_floor)
                    by_task.append(broker)
                self.brokers[agent.id] = broker

        states = []
        for agent in cfg.agents:
            task = tasks[agent.id]
            step = agent.step_size or linear_task.default_step_size(task.data, self.spec, cfg.step_scale)
            states.append(AgentState(
                id=agent.id, params=init, task=task, step_size=step, policy=agent.policy, delay=agent.delay,
            ))
        return states

    def _setup_mlp(self, rng: np.random.Generator) -> List[AgentState]:
        cfg, mlp = self.config, self.config.mlp
        if cfg.endowment is not None:
            pool = mlp_align.moons_class_pool(cfg.pool_per_class, mlp.moons_noise, rng)
            datasets = {
                a.id: mlp_align.moons_endowment(pool, index % 2, cfg.endowment)
                for index, a in enumerate(cfg.agents)
            }
        else:
            datasets = {a.id: mlp_align.synthesize_moons(a.n, mlp.moons_noise, rng) for a in cfg.agents}
        broker_task = MlpTask(data=mlp_align.synthesize_moons(cfg.broker.n, mlp.moons_noise, rng))

        widths = mlp.architecture(2, 2)
        states = []
        for agent in cfg.agents:
            task = MlpTask(data=datasets[agent.id])
            step = agent.step_size or mlp.step_size
            params = mlp_align.init_mlp(widths, rng, mlp.init_scale)
            params = mlp_align.train_mlp(params, task, step, mlp.warmup_epochs, round_index=0)
            states.append(AgentState(
                id=agent.id, params=params.flatten(), task=task, step_size=step,
                policy=agent.policy, delay=agent.delay,
            ))
            self.shapes = params.shapes

        if not self.brokers:
            broker = MlpBrokerService(broker_task, self.shapes, mlp.layer_set, mlp.align, mlp.sweeps, cfg.weight_floor)
            self.brokers = {a.id: broker for a in cfg.agents}
        return states

    # per-agent quantities

    def _network(self, params: ParameterVector) -> MlpParams:
        return MlpParams.unflatten(params, self.shapes)

    def local_step(self, state: AgentState, round_index: int) -> ParameterVector:
        """One gradient step on the agent's own data."""
        if isinstance(state.task, MlpTask):
            trained = mlp_align.train_mlp(self._network(state.params), state.task, state.step_size, 1, round_index)
            return trained.flatten()
        return gradient_step(state.params, state.task.data, state.step_size, self.spec, round_index)

    def own_loss(self, state: AgentState, params: ParameterVector) -> float:
        if isinstance(state.task, MlpTask):
            return mlp_align.mlp_forward_loss(self._network(params), state.task.data, state.task.kind)
        return empirical_loss(params, state.task.data, self.spec)

    def grad_norm(self, state: AgentState, params: ParameterVector) -> float:
        if isinstance(state.task, MlpTask):
            grad = mlp_align.mlp_gradient(self._network(params), state.task.data, state.task.kind)
        else:
            grad = gradient(params, state.task.data, self.spec)
        return float(np.linalg.norm(grad))

    def curve_point(self, state: AgentState, round_index: int, local_own_loss: Optional[float] = None) -> AgentCurvePoint:
        broker_loss = self.brokers[state.id].loss(state.params)
        if not math.isfinite(broker_loss):
            raise DivergenceError(round_index, f"broker loss of agent {state.id} is not finite")
        est_error = None
        if isinstance(state.task, LinearTask):
            est_error = linear_task.estimation_error(state.params, state.task.true_params)
        return AgentCurvePoint(
            round=round_index,
            agent=state.id,
            broker_loss=broker_loss,
            own_loss=self.own_loss(state, state.params),
            est_error=est_error,
            cum_payment=float(self.ledger[state.id]),
            local_own_loss=local_own_loss,
            grad_norm=self.grad_norm(state, state.params),
        )

    # trading schedule

    def is_trade_round(self, round_index: int) -> bool:
        cfg = self.config
        return round_index > cfg.trade_start and (round_index - cfg.trade_start) % cfg.trade_every == 0

    def trades_this_round(self, state: AgentState, round_index: int) -> bool:
        if state.policy == Policy.NEVER_TRADE or not self.is_trade_round(round_index):
            return False
        if state.policy == Policy.ASYNCHRONOUS:
            return round_index > self.config.trade_start + state.delay
        return True

    # valuations

    def seller_valuation(self, own_gain: GainReport, alpha: float, beta: float) -> float:
        """
        Seller's quote computed from its own gain and both purchased weights.

        A seller without a finite positive gain of its own quotes 0.
        """
        if not (math.isfinite(own_gain.value) and own_gain.value > 0):
            return 0.0
        if self.config.seller_valuation == SellerValuation.LOWER_BOUND:
            return buyer_gain_bounds(own_gain.value, alpha, beta).lower
        return seller_virtual_valuation(own_gain.value, alpha, beta, self.config.prior_kind)

    def _quote(self, purchase_gain: GainReport, beta: float, seller_side: Tuple[MergeProposal, GainReport]) -> Tuple[float, float]:
        buyer_value = purchase_gain.value
        if self.config.seller_valuation == SellerValuation.TRUTHFUL:
            buyer_value = buyer_value if math.isfinite(buyer_value) else 0.0
            return buyer_value, buyer_value
        seller_proposal, seller_gain = seller_side
        seller_value = self.seller_valuation(seller_gain, seller_proposal.weight, beta)
        if not math.isfinite(buyer_value):
            # a perfect merge pays the seller's ask
            buyer_value = seller_value
        return buyer_value, seller_value

    # rounds

    def run_round(self, states: List[AgentState], round_index: int) -> RoundOutcome:
        """
        Execute one round of local training and trading.

        Args:
            states: Agent states after the previous round, in id order
            round_index: Round number, starting at 1

        Returns:
            RoundOutcome with the new states, trade records, transfers and curve points

        Raises:
            DivergenceError: If any loss or update becomes non-finite
        """
        try:
            return self._run_round(states, round_index)
        except DivergenceError as e:
            if e.round_index is None:
                raise DivergenceError(round_index, e.detail) from e
            raise

    def _run_round(self, states: List[AgentState], round_index: int) -> RoundOutcome:
        cfg = self.config
        by_id = {s.id: s for s in states}
        dots = {s.id: self.local_step(s, round_index) for s in states}
        local_losses = {s.id: self.own_loss(s, dots[s.id]) for s in states}
        for broker in {id(b): b for b in self.brokers.values()}.values():
            broker.clear_cache()

        evaluated: Dict[Tuple[str, str], Tuple[MergeProposal, GainReport]] = {}

        def evaluate(buyer: AgentState, seller: AgentState) -> Tuple[MergeProposal, GainReport]:
            key = (buyer.id, seller.id)
            if key not in evaluated:
                broker = self.brokers[buyer.id]
                if buyer.policy == Policy.FEDAVG:
                    weight = fedavg_weight(buyer.n_samples, seller.n_samples)
                    proposal = broker.fixed_merge(dots[buyer.id], dots[seller.id], weight)
                else:
                    proposal = broker.optimize_merge_weight(dots[buyer.id], dots[seller.id])
                evaluated[key] = (proposal, broker.gain(cfg.gain_kind, dots[buyer.id], proposal.merged))
            return evaluated[key]

        purchases: List[_Purchase] = []
        for buyer in states:
            if not self.trades_this_round(buyer, round_index):
                continue
            best: Optional[Tuple[str, MergeProposal, GainReport]] = None
            for seller in states:
                if seller.id == buyer.id:
                    continue
                proposal, gain = evaluate(buyer, seller)
                if best is None or gain.value > best[2].value:
                    best = (seller.id, proposal, gain)
            seller_id, proposal, gain = best

            buyer_value = seller_value = payment = None
            if self.rules[buyer.policy](gain, proposal.weight):
                if cfg.pricing:
                    seller_side = evaluate(by_id[seller_id], buyer)
                    buyer_value, seller_value = self._quote(gain, proposal.weight, seller_side)
                    payment = settle(buyer_value, seller_value)
                else:
                    payment = 0.0
            logger.debug(
                f"Round {round_index}: {buyer.id} <- {seller_id} weight={proposal.weight:.6g} "
                f"gain={gain.value:.6g} payment={payment}"
            )
            purchases.append(_Purchase(buyer.id, seller_id, proposal, gain, buyer_value, seller_value, payment))

        trades = [
            TradeRecord(
                round=round_index,
                buyer=p.buyer,
                seller=p.seller,
                merge_weight=p.proposal.weight,
                gain=p.gain,
                buyer_valuation=p.buyer_valuation,
                seller_valuation=p.seller_valuation,
                payment=p.payment,
                indicator=p.payment is not None,
            )
            for p in purchases
        ]
        transfers = self._book(purchases, round_index) if cfg.pricing else []

        executed = {p.buyer: p for p in purchases if p.payment is not None}
        new_states = [
            s.model_copy(update={"params": executed[s.id].proposal.merged if s.id in executed else dots[s.id]})
            for s in states
        ]
        curves = [self.curve_point(s, round_index, local_losses[s.id]) for s in new_states]
        return RoundOutcome(new_states, trades, transfers, curves)

    @staticmethod
    def quantize(amount: float) -> float:
        """Round a payment onto the 2**-32 grid used by the ledger."""
        return round(amount * PAYMENT_SCALE) / PAYMENT_SCALE

    def _book(self, purchases: List[_Purchase], round_index: int) -> List[Transfer]:
        """Record payments, netting a mutual pair into one signed transfer."""
        executed = {(p.buyer, p.seller): p for p in purchases if p.payment is not None}
        transfers = []
        for (buyer, seller), purchase in executed.items():
            reverse = executed.get((seller, buyer))
            if reverse is None:
                transfers.append(Transfer(round=round_index, payer=buyer, payee=seller, amount=self.quantize(purchase.payment)))
            elif seller < buyer:
                # seller (A) sold to buyer (B) and bought from B in the same round
                q = ValuationQuadruple(
                    v_a_self=purchase.seller_valuation,
                    v_b_of_a=purchase.buyer_valuation,
                    v_b_self=reverse.seller_valuation,
                    v_a_of_b=reverse.buyer_valuation,
                )
                transfers.append(Transfer(round=round_index, payer=buyer, payee=seller, amount=self.quantize(nash_price_difference(q))))
        for transfer in transfers:
            amount = Fraction(transfer.amount)
            self.ledger[transfer.payee] += amount
            self.ledger[transfer.payer] -= amount
        return transfers

    def condition_numbers(self, states: List[AgentState]) -> Dict[str, float]:
        """ρ of every noiseless always-trading linear agent whose design has full column rank."""
        numbers = {}
        for state in states:
            task = state.task
            if (
                state.policy != Policy.ALWAYS_TRADE
                or not isinstance(task, LinearTask)
                or task.noise_variance > 0
                or task.data.n_samples < task.data.dimension
            ):
                continue
            method = "dense" if task.data.dimension <= linear_task.DENSE_DIMENSION else "iterative"
            try:
                summary = linear_task.spectrum(task.data, method=method, rng=np.random.default_rng(self.config.seed))
            except SingularMatrixError as e:
                logger.warning(f"No condition number for agent {state.id}: {str(e)}")
                continue
            numbers[state.id] = summary.rho
        return numbers

    def run(self) -> MarketLog:
        """
        Run config.rounds rounds from the seeded initial state.

        Returns:
            MarketLog with round 0 and every later round

        Raises:
            DivergenceError: With the offending round
        """
        cfg = self.config
        logger.info(f"Simulating {len(cfg.agents)} agents for {cfg.rounds} rounds (seed {cfg.seed})")
        states = self.setup()
        log = MarketLog(
            config=cfg,
            step_sizes={s.id: s.step_size for s in states},
            broker_floor={a.id: self.brokers[a.id].floor() for a in cfg.agents},
            condition_numbers=self.condition_numbers(states),
        )
        log.curves.extend(self.curve_point(s, 0) for s in states)
        for round_index in range(1, cfg.rounds + 1):
            outcome = self.run_round(states, round_index)
            states = outcome.states
            log.trades.extend(outcome.trades)
            log.transfers.extend(outcome.transfers)
            log.curves.extend(outcome.curves)
        executed = sum(record.indicator for record in log.trades)
        logger.info(f"Simulation finished: {executed} executed trade(s) out of {len(log.trades)} decisions")
        return log


def run_round(
    states: List[AgentState],
    brokers: Dict[str, BrokerService],
    config: MarketConfig,
    round_index: int,
    rules: Optional[Mapping[Policy, DecisionRule]] = None,
) -> RoundOutcome:
    """Execute one round for externally built states and brokers."""
    simulator = MarketSimulator(config, rules=rules, brokers=brokers)
    return simulator.run_round(states, round_index)


def run_simulation(config: MarketConfig, rules: Optional[Mapping[Policy, DecisionRule]] = None) -> MarketLog:
    """Run a full simulation; identical configs give identical logs."""
    return MarketSimulator(config, rules=rules).run()


def convergence_metrics(
    log: MarketLog,
    epsilon: float,
    metric: ConvergenceMetric = ConvergenceMetric.EXCESS_LOSS,
) -> ConvergenceReport:
    """
    First round at which each agent's metric is at most epsilon.

    Args:
        log: Finished simulation log
        epsilon: Threshold > 0
        metric: Broker-evaluated excess loss or own-loss gradient norm

    Returns:
        ConvergenceReport, None for agents that never reach epsilon
    """
    rounds: Dict[str, Optional[int]] = {}
    for agent in log.config.agents:
        rounds[agent.id] = None
        for point in log.curve(agent.id):
            if metric == ConvergenceMetric.EXCESS_LOSS:
                value = point.broker_loss - log.broker_floor[agent.id]
            else:
                value = point.grad_norm
            if value <= epsilon:
                rounds[agent.id] = point.round
                break
    return ConvergenceReport(epsilon=epsilon, metric=metric.value, rounds=rounds)


def geometric_decay_check(
    log: MarketLog,
    rho: Optional[float] = None,
    agent: Optional[str] = None,
    slack: float = DECAY_SLACK,
) -> DecayReport:
    """
    Check that executed trades shrink the own loss by at most ρ/Δ per round.

    The round factor L(θ^t)/L(θ^{t−1}) is compared with ρ/Δ^t, and the
    merged loss L(θ̄^t) with both ends of loss_ratio_bounds around L(θ̇^t).
    The check needs noiseless linear tasks so that the own loss is the
    excess loss.

    Args:
        log: Finished simulation log
        rho: Condition number, taken from the log when omitted
        agent: Checked agent, the first always-trading agent when omitted
        slack: Relative and absolute slack on the bound

    Returns:
        DecayReport, not applicable with a reason when the log does not qualify

    Raises:
        DomainError: If an explicit rho is below 1
    """
    if rho is not None and not rho >= 1:
        raise DomainError(f"rho must be >= 1, got {rho!r}")
    cfg = log.config
    if cfg.task != TaskFamily.LINEAR or cfg.gain_kind != GainKind.ERROR_RATIO:
        return DecayReport(applicable=False, reason="needs a linear market with error-ratio gains")
    if agent is None:
        agent = next((a.id for a in cfg.agents if a.policy == Policy.ALWAYS_TRADE), None)
        if agent is None:
            return DecayReport(applicable=False, reason="no always-trading agent")
    spec = cfg.agent(agent)
    if spec.policy != Policy.ALWAYS_TRADE:
        return DecayReport(applicable=False, reason=f"agent {agent} does not always trade", agent=agent)
    if spec.noise > 0:
        return DecayReport(applicable=False, reason=f"agent {agent} has label noise", agent=agent)
    rho = rho if rho is not None else log.condition_numbers.get(agent)
    if rho is None or not math.isfinite(rho):
        return DecayReport(applicable=False, reason=f"no finite condition number for agent {agent}", agent=agent)
    # iterative estimates of a well-conditioned design can land just under 1
    rho = max(rho, 1.0)

    own = {point.round: point for point in log.curve(agent)}
    checked, violations, lower_violations = 0, [], []
    max_factor = max_ratio = max_merge = min_merge = None
    for record in log.trades:
        if record.buyer != agent or not record.indicator or not math.isfinite(record.gain.value):
            continue
        before, after = own[record.round - 1].own_loss, own[record.round]
        if before <= 0 or not after.local_own_loss:
            continue
        bound = rho / record.gain.value
        factor = after.own_loss / before
        merge_factor = after.own_loss / after.local_own_loss
        lowest, highest = linear_task.loss_ratio_bounds(record.gain.value, rho, after.local_own_loss)
        checked += 1
        max_factor = factor if max_factor is None else max(max_factor, factor)
        max_ratio = factor / bound if max_ratio is None else max(max_ratio, factor / bound)
        max_merge = merge_factor if max_merge is None else max(max_merge, merge_factor)
        min_merge = merge_factor if min_merge is None else min(min_merge, merge_factor)
        if factor > bound * (1.0 + slack) + slack or after.own_loss > highest * (1.0 + slack) + slack:
            violations.append(record.round)
        if after.own_loss < lowest * (1.0 - slack) - slack:
            lower_violations.append(record.round)

    if violations or lower_violations:
        logger.warning(
            f"Decay bounds broken for agent {agent}: upper in rounds {violations}, lower in rounds {lower_violations}"
        )
    return DecayReport(
        applicable=True,
        agent=agent,
        rho=rho,
        checked_rounds=checked,
        violations=violations,
        lower_violations=lower_violations,
        max_factor=max_factor,
        max_bound_ratio=max_ratio,
        max_merge_factor=max_merge,
        min_merge_factor=min_merge,
    )


def theoretical_rounds(
    initial_loss: float,
    floor_loss: float,
    step_size: float,
    epsilon: float,
    min_gain: float = 0.0,
) -> Dict[str, float]:
    """
    Round budgets after which the gradient norm is guaranteed below epsilon.

    Never trading needs 2(L⁰ − L*)/(ηε²) rounds; trading with a per-round loss
    decrease of at least min_gain needs 2(L⁰ − L*)/(ηε² + 2·min_gain).
    """
    gap = max(initial_loss - floor_loss, 0.0)
    never = 2.0 * gap / (step_size * epsilon ** 2)
    always = 2.0 * gap / (step_size * epsilon ** 2 + 2.0 * max(min_gain, 0.0))
    return {"never_trade": never, "always_trade": always}


def linear_rate_factor(rho: float) -> float:
    """Per-step contraction (ρ − 1)/(ρ + 1) of exact line search on a quadratic."""
    return (rho - 1.0) / (rho + 1.0)
