"""
Core loss and update services.

This module provides the empirical loss, its gradient, the gradient-descent
update and the merge rule shared by linear and layered models.
"""

import logging
from typing import Optional

import numpy as np

from parammarket.exceptions import DimensionMismatchError, DivergenceError, DomainError
from parammarket.models.core import LabeledDataset, LossSpec, ParameterVector

logger = logging.getLogger(__name__)

DEFAULT_LOSS = LossSpec()


def _check_dimensions(params: ParameterVector, data: LabeledDataset) -> None:
    if params.dimension != data.dimension:
        raise DimensionMismatchError(params.dimension, data.dimension)


def residuals(params: ParameterVector, data: LabeledDataset) -> np.ndarray:
    """Xθ − Y for a linear model."""
    _check_dimensions(params, data)
    return data.inputs @ params.values - data.labels


def empirical_loss(params: ParameterVector, data: LabeledDataset, spec: LossSpec = DEFAULT_LOSS) -> float:
    """
    Evaluate the empirical squared loss of a linear model.

    Args:
        params: Model parameters θ
        data: Dataset (X, Y)
        spec: Sum of squares ‖Xθ − Y‖² or the same divided by n

    Returns:
        Non-negative finite loss value

    Raises:
        DimensionMismatchError: If θ and X disagree on d
        DivergenceError: If the loss overflows
    """
    r = residuals(params, data)
    loss = float(r @ r) * spec.scale(data.n_samples)
    if not np.isfinite(loss):
        raise DivergenceError(None, "loss is not finite")
    return loss


def gradient(params: ParameterVector, data: LabeledDataset, spec: LossSpec = DEFAULT_LOSS) -> np.ndarray:
    """Gradient 2Xᵀ(Xθ − Y), scaled like the loss."""
    r = residuals(params, data)
    return 2.0 * spec.scale(data.n_samples) * (data.inputs.T @ r)


def apply_gradient(
    params: ParameterVector,
    grad: np.ndarray,
    step_size: float,
    round_index: Optional[int] = None,
) -> ParameterVector:
    """
    Take one descent step θ − η·g.

    This is the single update path used by linear agents and by MLP training.

    Raises:
        DomainError: If the step size is not positive
        DivergenceError: If the gradient or the update is not finite
    """
    if not step_size > 0:
        raise DomainError(f"step size must be positive, got {step_size!r}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise DimensionMismatchError(params.dimension, int(grad.size))
    with np.errstate(over="ignore", invalid="ignore"):
        updated = params.values - step_size * grad
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(updated))):
        logger.error(f"Non-finite gradient step in round {round_index} with step size {step_size:g}")
        raise DivergenceError(round_index, "gradient step produced non-finite parameters")
    return ParameterVector(values=updated)


def gradient_step(
    params: ParameterVector,
    data: LabeledDataset,
    step_size: float,
    spec: LossSpec = DEFAULT_LOSS,
    round_index: Optional[int] = None,
) -> ParameterVector:
    """
    Apply one gradient-descent update on a linear least-squares loss.

    Args:
        params: Current parameters
        data: Agent's own data
        step_size: Learning rate η > 0
        spec: Loss convention
        round_index: Round reported by a divergence error

    Returns:
        Updated parameters θ − η∇L(θ)

    Raises:
        DomainError: If η is not positive
        DivergenceError: If the update overflows
    """
    with np.errstate(over="ignore", invalid="ignore"):
        grad = gradient(params, data, spec)
    return apply_gradient(params, grad, step_size, round_index)


def merge(buyer: ParameterVector, seller: ParameterVector, weight: float) -> ParameterVector:
    """
    Combine two parameter sets as (1 − weight)·buyer + weight·seller.

    Raises:
        DomainError: If weight is outside (0, 1]
        DimensionMismatchError: If the vectors differ in dimension
    """
    if not 0.0 < weight <= 1.0:
        raise DomainError(f"merge weight must lie in (0, 1], got {weight!r}")
    seller.require_dimension(buyer.dimension)
    if weight == 1.0:
        return seller
    if buyer == seller:
        return buyer
    return ParameterVector(values=(1.0 - weight) * buyer.values + weight * seller.values)
