"""
Broker service.

This module provides the trusted broker: it tries prospective merges on its
own validation data before any purchase, reports gains from trade and offers
the FedAvg baseline weight.
"""

import logging
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from parammarket.exceptions import DomainError, PerfectMergeError
from parammarket.models.core import LabeledDataset, LossSpec, ParameterVector
from parammarket.models.market import GainKind, GainReport, MergeProposal
from parammarket.models.mlp import MlpParams, MlpTask
from parammarket.services.core import DEFAULT_LOSS, merge
from parammarket.services.linear_task import estimation_error
from parammarket.services import mlp_align

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6
WEIGHT_TOLERANCE = 1e-6
PERFECT_MERGE_TOLERANCE = 1e-15


def fedavg_weight(n_buyer: int, n_seller: int) -> float:
    """
    Seller's share of the pooled data, n_seller / (n_buyer + n_seller).

    Raises:
        DomainError: If either count is below 1
    """
    if n_buyer < 1 or n_seller < 1:
        raise DomainError(f"sample counts must be >= 1, got {n_buyer} and {n_seller}")
    return n_seller / (n_buyer + n_seller)


def gain_error_ratio(dot: ParameterVector, merged: ParameterVector, theta_star: ParameterVector) -> GainReport:
    """
    Ratio of squared estimation errors before and after the merge.

    Args:
        dot: Buyer's locally trained parameters
        merged: Proposed merged parameters
        theta_star: True parameters known to the broker

    Returns:
        GainReport with value ‖θ̇ − θ*‖² / ‖θ̄ − θ*‖², beneficial when > 1

    Raises:
        PerfectMergeError: If the merged error is at most 1e-15
    """
    error_after = estimation_error(merged, theta_star)
    error_before = estimation_error(dot, theta_star)
    if error_after <= PERFECT_MERGE_TOLERANCE:
        raise PerfectMergeError(error_before)
    return GainReport.of(GainKind.ERROR_RATIO, error_before / error_after)


def search_merge_weight(
    objective: Callable[[float], float],
    weight_floor: float = WEIGHT_FLOOR,
    anchors: Iterable[float] = (0.5, 1.0),
    tol: float = WEIGHT_TOLERANCE,
) -> Tuple[float, float]:
    """
    Minimise a broker objective over merge weights in [weight_floor, 1].

    A bounded golden-section/parabolic search runs first; the floor, the
    anchors and the search result are then compared directly so the returned
    weight is never worse than any of them. Ties go to the smaller weight.

    Returns:
        (weight, objective value)
    """
    result = minimize_scalar(objective, bounds=(weight_floor, 1.0), method="bounded", options={"xatol": tol})
    candidates = sorted({weight_floor, float(result.x), *(float(a) for a in anchors if weight_floor <= a <= 1.0)})
    best_weight, best_value = candidates[0], objective(candidates[0])
    for weight in candidates[1:]:
        value = objective(weight)
        if value < best_value:
            best_weight, best_value = weight, value
    return best_weight, best_value


class BrokerService:
    """Broker holding noiseless validation data for linear tasks."""

    def __init__(
        self,
        broker_data: LabeledDataset,
        spec: LossSpec = DEFAULT_LOSS,
        theta_star: Optional[ParameterVector] = None,
        weight_floor: float = WEIGHT_FLOOR,
    ):
        """
        Initialize the broker.

        Args:
            broker_data: Validation data (X_z, Y_z)
            spec: Loss convention for broker losses
            theta_star: True parameters, needed for error-ratio gains
            weight_floor: Stand-in for the open end of (0, 1]
        """
        self.broker_data = broker_data
        self.spec = spec
        self.theta_star = theta_star
        self.weight_floor = weight_floor
        self._predictions: Dict[int, Tuple[ParameterVector, np.ndarray]] = {}

    def clear_cache(self) -> None:
        """Forget cached predictions, called once per round."""
        self._predictions.clear()

    def _predict(self, params: ParameterVector) -> np.ndarray:
        cached = self._predictions.get(id(params))
        if cached is not None and cached[0] is params:
            return cached[1]
        params.require_dimension(self.broker_data.dimension)
        prediction = self.broker_data.inputs @ params.values
        self._predictions[id(params)] = (params, prediction)
        return prediction

    def _loss_of_prediction(self, prediction: np.ndarray) -> float:
        r = prediction - self.broker_data.labels
        return float(r @ r) * self.spec.scale(self.broker_data.n_samples)

    def loss(self, params: ParameterVector) -> float:
        """Broker-evaluated empirical loss."""
        return self._loss_of_prediction(self._predict(params))

    def floor(self) -> float:
        """Broker loss of θ*, 0 without θ*."""
        return 0.0 if self.theta_star is None else self.loss(self.theta_star)

    def optimize_merge_weight(self, buyer_dot: ParameterVector, seller_dot: ParameterVector) -> MergeProposal:
        """
        Find the seller share minimising the broker loss of the merge.

        The loss is quadratic in the weight, so the minimiser
        ν* = ⟨Xδ, Y − Xθ_buyer⟩ / ‖Xδ‖² is clamped into [weight_floor, 1].

        Args:
            buyer_dot: Buyer's locally trained parameters
            seller_dot: Seller's locally trained parameters

        Returns:
            MergeProposal with the optimal weight and both broker losses

        Raises:
            DimensionMismatchError: If the vectors do not match the broker data
        """
        seller_dot.require_dimension(buyer_dot.dimension)
        p_buyer = self._predict(buyer_dot)
        p_seller = self._predict(seller_dot)
        loss_before = self._loss_of_prediction(p_buyer)

        direction = p_seller - p_buyer
        curvature = float(direction @ direction)
        if buyer_dot == seller_dot or curvature == 0.0:
            if buyer_dot == seller_dot:
                logger.warning("Seller parameters equal the buyer's; degenerate proposal at the weight floor")
            weight = self.weight_floor
        else:
            weight = float(direction @ (self.broker_data.labels - p_buyer)) / curvature
            weight = min(max(weight, self.weight_floor), 1.0)

        merged = merge(buyer_dot, seller_dot, weight)
        if merged is seller_dot:
            p_merged = p_seller
        elif merged is buyer_dot:
            p_merged = p_buyer
        else:
            p_merged = p_buyer + weight * direction
            self._predictions[id(merged)] = (merged, p_merged)
        return MergeProposal(
            weight=weight,
            merged=merged,
            broker_loss_before=loss_before,
            broker_loss_after=self._loss_of_prediction(p_merged),
        )

    def fixed_merge(self, buyer_dot: ParameterVector, seller_dot: ParameterVector, weight: float) -> MergeProposal:
        """Merge at a given weight without optimisation (FedAvg)."""
        merged = merge(buyer_dot, seller_dot, weight)
        return MergeProposal(
            weight=weight,
            merged=merged,
            broker_loss_before=self.loss(buyer_dot),
            broker_loss_after=self.loss(merged),
        )

    def gain_loss_difference(self, dot: ParameterVector, merged: ParameterVector) -> GainReport:
        """Broker loss before minus after the merge, beneficial when > 0."""
        return GainReport.of(GainKind.LOSS_DIFFERENCE, self.loss(dot) - self.loss(merged))

    def gain_error_ratio(self, dot: ParameterVector, merged: ParameterVector) -> GainReport:
        """Error ratio against the broker's θ*."""
        if self.theta_star is None:
            raise DomainError("error-ratio gains need the true parameters")
        return gain_error_ratio(dot, merged, self.theta_star)

    def gain(self, kind: GainKind, dot: ParameterVector, merged: ParameterVector) -> GainReport:
        """
        Report the configured gain, treating a perfect merge as unbounded.
        """
        if kind == GainKind.LOSS_DIFFERENCE:
            return self.gain_loss_difference(dot, merged)
        try:
            return self.gain_error_ratio(dot, merged)
        except PerfectMergeError:
            logger.warning("Merge reaches θ* exactly; reporting an unbounded gain")
            return GainReport.of(GainKind.ERROR_RATIO, float("inf"))


class MlpBrokerService(BrokerService):
    """Broker for MLP markets: aligns the seller, then searches the weight."""

    def __init__(
        self,
        broker_task: MlpTask,
        shapes: Sequence[Tuple[int, int]],
        layer_set: Optional[Sequence[int]] = None,
        align: bool = True,
        sweeps: int = 10,
        weight_floor: float = WEIGHT_FLOOR,
    ):
        super().__init__(broker_task.data, weight_floor=weight_floor)
        self.task = broker_task
        self.shapes = tuple(tuple(s) for s in shapes)
        self.layer_set = tuple(range(len(self.shapes))) if layer_set is None else tuple(sorted(set(layer_set)))
        self.align = align
        self.sweeps = sweeps

    def unflatten(self, params: ParameterVector) -> MlpParams:
        return MlpParams.unflatten(params, self.shapes)

    def loss(self, params: ParameterVector) -> float:
        return mlp_align.mlp_forward_loss(self.unflatten(params), self.task.data, self.task.kind)

    def aligned(self, buyer_dot: ParameterVector, seller_dot: ParameterVector) -> MlpParams:
        """Seller's network with hidden units permuted to match the buyer."""
        buyer, seller = self.unflatten(buyer_dot), self.unflatten(seller_dot)
        if not self.align:
            return seller
        perms = mlp_align.weight_matching_alignment(buyer, seller, self.sweeps)
        return mlp_align.apply_permutation(seller, perms)

    def optimize_merge_weight(self, buyer_dot: ParameterVector, seller_dot: ParameterVector) -> MergeProposal:
        """
        Align the seller, then search the subset-merge weight on broker loss.

        Returns:
            MergeProposal whose merged parameters are the flattened subset merge
        """
        buyer = self.unflatten(buyer_dot)
        seller = self.aligned(buyer_dot, seller_dot)

        def candidate(weight: float) -> MlpParams:
            return mlp_align.subset_merge(buyer, seller, self.layer_set, weight)

        def objective(weight: float) -> float:
            return mlp_align.mlp_forward_loss(candidate(weight), self.task.data, self.task.kind)

        weight, loss_after = search_merge_weight(objective, self.weight_floor)
        return MergeProposal(
            weight=weight,
            merged=candidate(weight).flatten(),
            broker_loss_before=self.loss(buyer_dot),
            broker_loss_after=loss_after,
        )
