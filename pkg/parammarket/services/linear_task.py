"""
Linear task service.

This module generates synthetic linear-regression tasks and computes the
linear-model analytics used by the market: estimation error, the spectrum of
XᵀX, step sizes and loss-ratio bounds.
"""

import logging
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.sparse.linalg import LinearOperator, eigsh

from parammarket.exceptions import DomainError, SingularMatrixError
from parammarket.models.core import LabeledDataset, LossSpec, ParameterVector
from parammarket.models.linear import LinearTask, SpectrumSummary

logger = logging.getLogger(__name__)

SPECTRUM_TOLERANCE = 1e-10
SINGULAR_TOLERANCE = 1e-12
DENSE_DIMENSION = 64
# feature scale of the weak half of a class
MINOR_SCALE = 0.1


def draw_theta_star(dim: int, scale: float, rng: np.random.Generator) -> ParameterVector:
    """Draw θ* with i.i.d. N(0, scale²) entries."""
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    return ParameterVector(values=scale * rng.standard_normal(dim))


def related_theta_star(base: ParameterVector, distance: float, rng: np.random.Generator) -> ParameterVector:
    """
    Move θ* by a fixed distance in a random direction.

    The direction is always drawn so that the generator stream does not depend
    on the distance.
    """
    if distance < 0:
        raise DomainError(f"distance must be non-negative, got {distance!r}")
    direction = rng.standard_normal(base.dimension)
    direction /= np.linalg.norm(direction)
    if distance == 0:
        return base
    return ParameterVector(values=base.values + distance * direction)


def synthesize_task(
    dim: int,
    n: int,
    noise_variance: float,
    theta_star: ParameterVector,
    rng: np.random.Generator,
) -> LinearTask:
    """
    Generate a linear-regression task with standard normal inputs.

    Args:
        dim: Number of features d
        n: Number of samples
        noise_variance: Label noise variance σ²
        theta_star: Ground truth parameters
        rng: Seeded generator

    Returns:
        LinearTask with labels Xθ* + ε, ε ~ N(0, σ²I)

    Raises:
        DomainError: If the arguments are out of range
    """
    if dim < 1 or n < 1:
        raise DomainError(f"dim and n must be >= 1, got dim={dim}, n={n}")
    if noise_variance < 0:
        raise DomainError(f"noise variance must be non-negative, got {noise_variance!r}")
    theta_star.require_dimension(dim)

    inputs = rng.standard_normal((n, dim))
    noise = rng.standard_normal(n)
    labels = inputs @ theta_star.values
    if noise_variance > 0:
        labels = labels + np.sqrt(noise_variance) * noise
    return LinearTask(
        data=LabeledDataset(inputs=inputs, labels=labels),
        true_params=theta_star,
        noise_variance=noise_variance,
    )


class ClassPool(NamedTuple):
    """Rows shared by every agent in the class-endowment scheme."""
    inputs: Tuple[np.ndarray, np.ndarray]
    noise: Tuple[np.ndarray, np.ndarray]


def synthesize_class_pool(dim: int, per_class: int, rng: np.random.Generator) -> ClassPool:
    """
    Draw two classes of rows with complementary feature scales.

    Class 0 is strong on the first half of the features and weak on the
    second; class 1 is the opposite.
    """
    if dim < 2 or per_class < 1:
        raise DomainError(f"class pool needs dim >= 2 and per_class >= 1, got {dim}, {per_class}")
    half = dim // 2
    scales = np.full((2, dim), MINOR_SCALE)
    scales[0, :half] = 1.0
    scales[1, half:] = 1.0
    inputs = tuple(rng.standard_normal((per_class, dim)) * scales[c] for c in range(2))
    noise = tuple(rng.standard_normal(per_class) for _ in range(2))
    return ClassPool(inputs=inputs, noise=noise)


def endowment_task(
    pool: ClassPool,
    scarce_class: int,
    fraction: float,
    noise_variance: float,
    theta_star: ParameterVector,
) -> LinearTask:
    """
    Build an agent's task holding a fraction of one class and all of the other.

    At fraction 1 every agent receives the same rows in the same order.
    """
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"endowment fraction must lie in (0, 1], got {fraction!r}")
    blocks, noises = [], []
    for c in range(2):
        rows = pool.inputs[c].shape[0]
        keep = rows if c != scarce_class else max(1, int(np.ceil(fraction * rows)))
        blocks.append(pool.inputs[c][:keep])
        noises.append(pool.noise[c][:keep])
    inputs = np.vstack(blocks)
    labels = inputs @ theta_star.values
    if noise_variance > 0:
        labels = labels + np.sqrt(noise_variance) * np.concatenate(noises)
    return LinearTask(
        data=LabeledDataset(inputs=inputs, labels=labels),
        true_params=theta_star,
        noise_variance=noise_variance,
    )


def estimation_error(params: ParameterVector, theta_star: ParameterVector) -> float:
    """Squared estimation error ‖θ − θ*‖²."""
    diff = (params - theta_star).values
    return float(diff @ diff)


def _power_iteration(matvec, dim: int, rng: np.random.Generator, tol: float, max_iter: int) -> float:
    vector = rng.standard_normal(dim)
    vector /= np.linalg.norm(vector)
    eigenvalue = 0.0
    for _ in range(max_iter):
        image = matvec(vector)
        estimate = float(vector @ image)
        norm = np.linalg.norm(image)
        if norm == 0:
            return 0.0
        vector = image / norm
        if abs(estimate - eigenvalue) <= tol * abs(estimate):
            return estimate
        eigenvalue = estimate
    logger.warning(f"Power iteration stopped after {max_iter} iterations (tolerance {tol})")
    return eigenvalue


def spectrum(
    data: LabeledDataset,
    method: str = "iterative",
    tol: float = SPECTRUM_TOLERANCE,
    max_iter: int = 100_000,
    rng: Optional[np.random.Generator] = None,
) -> SpectrumSummary:
    """
    Compute the extreme eigenvalues of XᵀX and its condition number.

    Args:
        data: Dataset whose design matrix is analysed
        method: "iterative" (power and inverse-power iteration) or "dense"
        tol: Relative convergence tolerance on the Rayleigh quotient
        max_iter: Iteration cap for each extreme
        rng: Generator for the starting vectors (seed 0 when omitted)

    Returns:
        SpectrumSummary with lambda_max, lambda_min and rho

    Raises:
        SingularMatrixError: If XᵀX is not positive definite
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    gram = data.inputs.T @ data.inputs

    if method == "dense":
        eigenvalues = eigh(gram, eigvals_only=True)
        lambda_min, lambda_max = float(eigenvalues[0]), float(eigenvalues[-1])
    elif method == "iterative":
        lambda_max = _power_iteration(lambda v: gram @ v, data.dimension, rng, tol, max_iter)
        try:
            factor = cho_factor(gram)
        except LinAlgError as e:
            raise SingularMatrixError(f"XᵀX is not positive definite: {str(e)}")
        inverse_max = _power_iteration(lambda v: cho_solve(factor, v), data.dimension, rng, tol, max_iter)
        lambda_min = 1.0 / inverse_max if inverse_max > 0 else 0.0
    else:
        raise DomainError(f"unknown spectrum method {method!r}")

    if lambda_max <= 0 or lambda_min <= SINGULAR_TOLERANCE * lambda_max:
        raise SingularMatrixError(f"XᵀX is singular: lambda_min={lambda_min!r}, lambda_max={lambda_max!r}")
    return SpectrumSummary(
        lambda_max=lambda_max,
        lambda_min=lambda_min,
        rho=max(lambda_max / lambda_min, 1.0),
    )


def lipschitz_constant(data: LabeledDataset, spec: LossSpec) -> float:
    """
    Smoothness constant of the squared loss, 2·λ_max(XᵀX) times the loss scale.

    Uses Lanczos on the implicit operator XᵀX so large designs never form the
    Gram matrix.
    """
    dim = data.dimension
    if dim <= DENSE_DIMENSION:
        lambda_max = float(eigh(data.inputs.T @ data.inputs, eigvals_only=True)[-1])
    else:
        operator = LinearOperator(
            (dim, dim),
            matvec=lambda v: data.inputs.T @ (data.inputs @ v),
            dtype=np.float64,
        )
        lambda_max = float(eigsh(operator, k=1, which="LA", v0=np.ones(dim), return_eigenvectors=False)[0])
    return 2.0 * lambda_max * spec.scale(data.n_samples)


def default_step_size(data: LabeledDataset, spec: LossSpec, step_scale: float = 0.9) -> float:
    """Step size step_scale / L for the agent's own loss."""
    return step_scale / lipschitz_constant(data, spec)


def loss_ratio_bounds(gain: float, rho: float, loss_before: float) -> Tuple[float, float]:
    """
    Interval containing the post-merge loss given an error-ratio gain.

    Args:
        gain: Realized error ratio Δ > 0
        rho: Condition number ρ ≥ 1 of the agent's design
        loss_before: Loss of the pre-merge parameters

    Returns:
        (loss_before / (ρ·Δ), ρ·loss_before / Δ)

    Raises:
        DomainError: If gain or rho is out of range
    """
    if not gain > 0:
        raise DomainError(f"gain must be positive, got {gain!r}")
    if not rho >= 1:
        raise DomainError(f"rho must be >= 1, got {rho!r}")
    return loss_before / (rho * gain), rho * loss_before / gain
