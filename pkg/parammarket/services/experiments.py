"""
Experiment harness service.

This module builds on the engine: out-of-market comparisons and run
summaries, parameter sweeps over one configuration knob, the four MLP
comparison arms and the permuted-clone alignment demo.
"""

import logging
import math
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import spearmanr

from parammarket.models.config import MarketConfig, SweepAxis, SweepConfig, TaskFamily
from parammarket.models.log import MarketLog
from parammarket.models.market import Policy
from parammarket.models.mlp import LayerPermutations, MlpTask
from parammarket.services import engine, mlp_align
from parammarket.utils.artifacts import RUN_COLUMNS, frame

logger = logging.getLogger(__name__)

ALIGNMENT_TOLERANCE = 1e-8
FUNCTION_TOLERANCE = 1e-10


def relative_improvement(market_loss: float, out_of_market_loss: float) -> float:
    """(out-of-market − market) / out-of-market, 0 when the twin loss is 0."""
    if out_of_market_loss <= 0:
        return 0.0
    return (out_of_market_loss - market_loss) / out_of_market_loss


class SimulationResult(BaseModel):
    """A market log with its optional out-of-market twin."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    log: MarketLog = Field(..., description="Market run")
    twin: Optional[MarketLog] = Field(None, description="Never-trade twin on the same data")
    arms: Optional[Dict[str, float]] = Field(None, description="Measured agent's final broker loss per MLP arm")

    def improvements(self) -> Dict[str, float]:
        if self.twin is None:
            return {}
        return {
            agent.id: relative_improvement(self.log.final(agent.id).broker_loss, self.twin.final(agent.id).broker_loss)
            for agent in self.log.config.agents
        }

    def summary(self) -> dict:
        """JSON-ready summary: config echo, final metrics, convergence and checks."""
        log, cfg = self.log, self.log.config
        final = {}
        for agent in cfg.agents:
            point = log.final(agent.id)
            final[agent.id] = {
                "broker_loss": point.broker_loss,
                "own_loss": point.own_loss,
                "est_error": point.est_error,
                "cum_payment": point.cum_payment,
                "grad_norm": point.grad_norm,
                "step_size": log.step_sizes[agent.id],
                "executed_trades": sum(1 for r in log.trades if r.buyer == agent.id and r.indicator),
            }
        convergence = engine.convergence_metrics(log, cfg.epsilon, cfg.convergence_metric)
        payload = {
            "config": cfg.model_dump(mode="json"),
            "final": final,
            "convergence": convergence.model_dump(mode="json"),
            "trades": {"decisions": len(log.trades), "executed": sum(r.indicator for r in log.trades)},
            "payments_total": float(sum(Fraction(log.final(a.id).cum_payment) for a in cfg.agents)),
            "theoretical_rounds": theoretical_budget(log),
        }
        if self.twin is not None:
            twin_convergence = engine.convergence_metrics(self.twin, cfg.epsilon, cfg.convergence_metric)
            improvements = self.improvements()
            payload["out_of_market"] = {
                agent.id: {
                    "broker_loss": self.twin.final(agent.id).broker_loss,
                    "relative_improvement": improvements[agent.id],
                    "convergence_round": twin_convergence.rounds[agent.id],
                }
                for agent in cfg.agents
            }
        decay = engine.geometric_decay_check(log)
        payload["decay_check"] = decay.model_dump(mode="json")
        if self.arms is not None:
            payload["arms"] = self.arms
        return payload


def theoretical_budget(log: MarketLog) -> Dict[str, dict]:
    """Round budgets for every agent, plus the linear rate factor where ρ is known."""
    cfg = log.config
    budget = {}
    for agent in cfg.agents:
        curve = log.curve(agent.id)
        gains = [
            point.local_own_loss - point.own_loss
            for point in curve[1:]
            if point.local_own_loss is not None and point.local_own_loss > point.own_loss
        ]
        entry = engine.theoretical_rounds(
            curve[0].own_loss, 0.0, log.step_sizes[agent.id], cfg.epsilon, min(gains) if gains else 0.0
        )
        rho = log.condition_numbers.get(agent.id)
        if rho is not None:
            entry["linear_rate_factor"] = engine.linear_rate_factor(rho)
        budget[agent.id] = entry
    return budget


def mlp_arms(config: MarketConfig, agent: Optional[str] = None) -> Dict[str, float]:
    """
    Final broker loss of one agent under the four MLP comparison arms.

    The arms are out-of-market (nobody trades), FedAvg (fixed data-share
    weight, no alignment), merging without alignment and merging with
    alignment.
    """
    agent = agent or config.agents[0].id
    fedavg = [a.model_copy(update={"policy": Policy.FEDAVG}) for a in config.agents]
    configs = {
        "out_of_market": config.out_of_market(),
        "fedavg": config.model_copy(update={"agents": fedavg}),
        "without_alignment": config.model_copy(update={"mlp": config.mlp.model_copy(update={"align": False})}),
        "with_alignment": config.model_copy(update={"mlp": config.mlp.model_copy(update={"align": True})}),
    }
    return {arm: engine.run_simulation(cfg).final(agent).broker_loss for arm, cfg in configs.items()}


def simulate(config: MarketConfig) -> SimulationResult:
    """Run a market and, when configured, its out-of-market twin."""
    log = engine.run_simulation(config)
    twin = engine.run_simulation(config.out_of_market()) if config.compare_out_of_market else None
    arms = mlp_arms(config) if config.task == TaskFamily.MLP else None
    result = SimulationResult(log=log, twin=twin, arms=arms)
    for agent, improvement in result.improvements().items():
        logger.info(f"Agent {agent}: relative improvement {improvement:.2%} over its out-of-market twin")
    return result


class SweepCell(BaseModel):
    """One (axis value, seed) pair of a sweep."""
    cell_id: str = Field(..., description="Stable cell id, ordered like the axis values")
    axis: SweepAxis = Field(..., description="Swept knob")
    value: str = Field(..., description="Axis value as written in the config")
    seed: int = Field(..., description="Generator seed of this run")
    config: MarketConfig = Field(..., description="Resolved market")


def parse_layer_set(value: str) -> List[int]:
    return [int(i) for i in value.split(",") if i.strip()]


def apply_axis(market: MarketConfig, axis: SweepAxis, value: str, measured: str) -> MarketConfig:
    """
    Market with one knob set to an axis value.

    distance moves every agent but the measured one; delay makes the measured
    agent trade asynchronously.
    """
    payload = market.model_dump()
    if axis == SweepAxis.DISTANCE:
        for agent in payload["agents"]:
            if agent["id"] != measured:
                agent["distance"] = float(value)
    elif axis == SweepAxis.ENDOWMENT:
        payload["endowment"] = float(value)
    elif axis == SweepAxis.FREQUENCY:
        payload["trade_every"] = int(float(value))
    elif axis == SweepAxis.START:
        payload["trade_start"] = int(float(value))
    elif axis == SweepAxis.DELAY:
        for agent in payload["agents"]:
            if agent["id"] == measured:
                agent["policy"] = Policy.ASYNCHRONOUS
                agent["delay"] = int(float(value))
    elif axis == SweepAxis.LAYERS:
        payload["mlp"]["layer_set"] = parse_layer_set(value)
    return MarketConfig.model_validate(payload)


def sweep_cells(sweep: SweepConfig) -> List[SweepCell]:
    """Cells ordered by axis value, then seed."""
    values = sweep.values if sweep.axis != SweepAxis.SEED else [""]
    cells = []
    for index, value in enumerate(values):
        market = apply_axis(sweep.market, sweep.axis, value, sweep.measured_agent)
        for offset in range(sweep.seeds):
            seed = sweep.market.seed + offset
            cells.append(SweepCell(
                cell_id=f"{index:03d}",
                axis=sweep.axis,
                value=value if sweep.axis != SweepAxis.SEED else str(seed),
                seed=seed,
                config=market.model_copy(update={"seed": seed, "compare_out_of_market": False}),
            ))
    return cells


def run_cell(cell: SweepCell) -> List[dict]:
    """Run one cell and its twin; one row per agent."""
    log = engine.run_simulation(cell.config)
    twin = engine.run_simulation(cell.config.out_of_market())
    rows = []
    for agent in cell.config.agents:
        market_loss = log.final(agent.id).broker_loss
        twin_loss = twin.final(agent.id).broker_loss
        rows.append({
            "cell_id": cell.cell_id,
            "axis": cell.axis.value,
            "value": cell.value,
            "seed": cell.seed,
            "agent": agent.id,
            "market_loss": market_loss,
            "out_of_market_loss": twin_loss,
            "relative_improvement": relative_improvement(market_loss, twin_loss),
        })
    return rows


class SweepResult(BaseModel):
    """Per-run rows, their aggregate and the sweep summary."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    runs: pd.DataFrame = Field(..., description="One row per (cell, seed, agent)")
    aggregate: pd.DataFrame = Field(..., description="Mean and std per (cell, agent)")
    summary: dict = Field(..., description="Correlation and layer-subset rankings")


def aggregate_runs(runs: pd.DataFrame) -> pd.DataFrame:
    grouped = runs.groupby(["cell_id", "axis", "value", "agent"], sort=True)
    aggregate = grouped.agg(
        seeds=("seed", "count"),
        mean_market_loss=("market_loss", "mean"),
        mean_out_of_market_loss=("out_of_market_loss", "mean"),
        mean_improvement=("relative_improvement", "mean"),
        std_improvement=("relative_improvement", "std"),
    )
    return aggregate.reset_index()


def summarize_sweep(sweep: SweepConfig, runs: pd.DataFrame, aggregate: pd.DataFrame) -> dict:
    """Spearman correlation for numeric axes, subset ranking for the layers axis."""
    measured = sweep.measured_agent
    mine = aggregate[aggregate["agent"] == measured]
    summary = {
        "axis": sweep.axis.value,
        "measured_agent": measured,
        "cells": int(mine.shape[0]),
        "seeds": sweep.seeds,
        "base": sweep.market.model_dump(mode="json"),
    }
    if sweep.axis not in (SweepAxis.LAYERS, SweepAxis.SEED) and mine.shape[0] >= 2:
        correlation = spearmanr(mine["value"].astype(float), mine["mean_improvement"]).correlation
        summary["spearman"] = None if math.isnan(correlation) else float(correlation)
    if sweep.axis == SweepAxis.LAYERS:
        full = ",".join(str(i) for i in range(sweep.market.mlp.hidden_layers + 1))
        per_seed = runs[runs["agent"] == measured]
        winners = per_seed.loc[per_seed.groupby("seed")["relative_improvement"].idxmax(), ["seed", "value"]]
        normalized = winners["value"].map(lambda v: ",".join(str(i) for i in sorted(set(parse_layer_set(v)))))
        summary["best_subset_per_seed"] = dict(zip(winners["seed"].astype(int).astype(str), winners["value"]))
        summary["full_set_wins"] = int((normalized == full).sum())
    return summary


def run_sweep(sweep: SweepConfig, jobs: int = 1) -> SweepResult:
    """
    Run every cell of a sweep, in parallel when jobs > 1.

    Rows are ordered by cell id, seed and agent whatever the completion order.
    """
    cells = sweep_cells(sweep)
    logger.info(f"Sweeping {sweep.axis.value} over {len(cells)} run(s) with {jobs} job(s)")
    results = Parallel(n_jobs=jobs)(delayed(run_cell)(cell) for cell in cells)
    runs = frame([row for rows in results for row in rows], RUN_COLUMNS)
    runs = runs.sort_values(["cell_id", "seed", "agent"], kind="mergesort").reset_index(drop=True)
    aggregate = aggregate_runs(runs)
    return SweepResult(runs=runs, aggregate=aggregate, summary=summarize_sweep(sweep, runs, aggregate))


class AlignmentDemo(BaseModel):
    """Outcome of the permuted-clone and interpolation demo."""
    networks: int = Field(..., description="Random networks cloned")
    recovered: int = Field(..., description="Clones whose planted permutation was undone exactly")
    max_merge_deviation: float = Field(..., description="Largest |loss(α=0.5 merge) − loss(original)|")
    max_function_deviation: float = Field(..., description="Largest output change caused by a permutation")
    curve: List[Dict[str, float]] = Field(..., description="Interpolation losses with and without alignment")

    @property
    def passed(self) -> bool:
        return (
            self.recovered == self.networks
            and self.max_merge_deviation <= ALIGNMENT_TOLERANCE
            and self.max_function_deviation <= FUNCTION_TOLERANCE
        )


def random_permutations(params, rng: np.random.Generator) -> LayerPermutations:
    return LayerPermutations(perms=[tuple(int(i) for i in rng.permutation(w.shape[0])) for w in params.weights[:-1]])


def align_demo(
    seed: int = 0,
    networks: int = 20,
    widths: Tuple[int, ...] = (2, 16, 16, 2),
    samples: int = 400,
    epochs: int = 300,
    step_size: float = 0.5,
    alphas: int = 11,
) -> AlignmentDemo:
    """
    Plant random permutations in clones of random networks and undo them.

    Also trains two networks from independent initializations on two-moons
    data and records the loss along the straight line between them, with and
    without aligning the second to the first.
    """
    rng = np.random.default_rng(seed)
    data = mlp_align.synthesize_moons(samples, 0.1, rng)
    task = MlpTask(data=data)
    layers = range(len(widths) - 1)

    recovered, merge_gap, function_gap = 0, 0.0, 0.0
    for _ in range(networks):
        original = mlp_align.init_mlp(widths, rng)
        clone = mlp_align.apply_permutation(original, random_permutations(original, rng))
        function_gap = max(function_gap, float(np.max(np.abs(
            mlp_align.mlp_forward(clone, data.inputs) - mlp_align.mlp_forward(original, data.inputs)
        ))))
        aligned = mlp_align.apply_permutation(clone, mlp_align.weight_matching_alignment(original, clone))
        recovered += int(aligned == original)
        merged = mlp_align.subset_merge(original, aligned, layers, 0.5)
        merge_gap = max(merge_gap, abs(
            mlp_align.mlp_forward_loss(merged, data, task.kind) - mlp_align.mlp_forward_loss(original, data, task.kind)
        ))

    first = mlp_align.train_mlp(mlp_align.init_mlp(widths, rng), task, step_size, epochs)
    second = mlp_align.train_mlp(mlp_align.init_mlp(widths, rng), task, step_size, epochs)
    second_aligned = mlp_align.apply_permutation(second, mlp_align.weight_matching_alignment(first, second))
    curve = []
    for alpha in np.linspace(0.0, 1.0, alphas):
        alpha = float(alpha)
        if alpha == 0.0:
            aligned_loss = unaligned_loss = mlp_align.mlp_forward_loss(first, data, task.kind)
        else:
            aligned_loss = mlp_align.mlp_forward_loss(mlp_align.subset_merge(first, second_aligned, layers, alpha), data, task.kind)
            unaligned_loss = mlp_align.mlp_forward_loss(mlp_align.subset_merge(first, second, layers, alpha), data, task.kind)
        curve.append({"alpha": alpha, "loss_aligned": aligned_loss, "loss_unaligned": unaligned_loss})

    demo = AlignmentDemo(
        networks=networks,
        recovered=recovered,
        max_merge_deviation=merge_gap,
        max_function_deviation=function_gap,
        curve=curve,
    )
    logger.info(f"Recovered {recovered}/{networks} planted permutations")
    return demo
