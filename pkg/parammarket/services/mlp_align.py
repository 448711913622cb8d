"""
MLP training and alignment service.

This module trains tiny ReLU perceptrons with the core descent step, aligns
hidden units of two networks by layer-wise weight matching, and merges
subsets of layers.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from sklearn.datasets import make_moons

from parammarket.exceptions import ArchitectureMismatchError, DimensionMismatchError, DomainError
from parammarket.models.core import LabeledDataset, LossKind, LossSpec
from parammarket.models.mlp import LayerPermutations, MlpParams, MlpTask, TaskKind
from parammarket.services.core import apply_gradient, merge

logger = logging.getLogger(__name__)

DEFAULT_SWEEPS = 10


def _loss_spec(kind: TaskKind, spec: Optional[LossSpec]) -> LossSpec:
    if spec is not None:
        return spec
    if kind == TaskKind.REGRESSION:
        return LossSpec(kind=LossKind.SUM_OF_SQUARES)
    return LossSpec(kind=LossKind.MEAN_PER_SAMPLE)


def init_mlp(widths: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> MlpParams:
    """He-initialised weights and small random biases for the given widths."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(scale * rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(0.1 * scale * rng.standard_normal(fan_out))
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    """Network outputs, ReLU between layers and none after the last."""
    if inputs.shape[1] != params.widths[0]:
        raise DimensionMismatchError(inputs.shape[1], params.widths[0])
    hidden = inputs
    last = params.n_layers - 1
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        hidden = hidden @ w.T + b
        if index < last:
            hidden = np.maximum(hidden, 0.0)
    return hidden


def _check_head(params: MlpParams, data: LabeledDataset, kind: TaskKind) -> None:
    n_outputs = params.widths[-1]
    if kind == TaskKind.REGRESSION and n_outputs != 1:
        raise DimensionMismatchError(n_outputs, 1, "regression output width")
    if kind == TaskKind.CLASSIFICATION:
        labels = data.labels
        if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= n_outputs:
            raise DomainError(f"class labels must be integers in [0, {n_outputs})")


def mlp_forward_loss(
    params: MlpParams,
    data: LabeledDataset,
    kind: TaskKind,
    spec: Optional[LossSpec] = None,
) -> float:
    """
    Evaluate an MLP on a dataset.

    Args:
        params: Network parameters
        data: Inputs and labels (class indices for classification)
        kind: Squared error for regression, softmax cross-entropy for classification
        spec: Reduction; sum for regression and mean for classification by default

    Returns:
        Non-negative loss

    Raises:
        DimensionMismatchError: If the network does not fit the data
    """
    _check_head(params, data, kind)
    spec = _loss_spec(kind, spec)
    outputs = mlp_forward(params, data.inputs)
    if kind == TaskKind.REGRESSION:
        r = outputs[:, 0] - data.labels
        total = float(r @ r)
    else:
        classes = data.labels.astype(int)
        total = float(np.sum(logsumexp(outputs, axis=1) - outputs[np.arange(data.n_samples), classes]))
    return total * spec.scale(data.n_samples)


def mlp_gradient(
    params: MlpParams,
    data: LabeledDataset,
    kind: TaskKind,
    spec: Optional[LossSpec] = None,
) -> np.ndarray:
    """Backpropagated gradient in flatten() order."""
    _check_head(params, data, kind)
    spec = _loss_spec(kind, spec)
    activations = [data.inputs]
    last = params.n_layers - 1
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = activations[-1] @ w.T + b
        activations.append(np.maximum(z, 0.0) if index < last else z)

    outputs = activations[-1]
    scale = spec.scale(data.n_samples)
    if kind == TaskKind.REGRESSION:
        delta = 2.0 * scale * (outputs - data.labels[:, None])
    else:
        probabilities = np.exp(outputs - logsumexp(outputs, axis=1, keepdims=True))
        probabilities[np.arange(data.n_samples), data.labels.astype(int)] -= 1.0
        delta = scale * probabilities

    grads: List[np.ndarray] = [None] * params.n_layers
    for index in range(last, -1, -1):
        grads[index] = np.concatenate([(delta.T @ activations[index]).ravel(), delta.sum(axis=0)])
        if index:
            delta = (delta @ params.weights[index]) * (activations[index] > 0)
    return np.concatenate(grads)


def train_mlp(
    params: MlpParams,
    task: MlpTask,
    step_size: float,
    epochs: int,
    round_index: Optional[int] = None,
) -> MlpParams:
    """Full-batch gradient descent for a number of epochs."""
    shapes = params.shapes
    flat = params.flatten()
    for _ in range(epochs):
        grad = mlp_gradient(MlpParams.unflatten(flat, shapes), task.data, task.kind)
        flat = apply_gradient(flat, grad, step_size, round_index)
    return MlpParams.unflatten(flat, shapes)


def synthesize_moons(n: int, noise: float, rng: np.random.Generator) -> LabeledDataset:
    """Two-moons classification data drawn from the seeded generator."""
    inputs, labels = make_moons(n_samples=n, noise=noise, random_state=int(rng.integers(2**31 - 1)))
    return LabeledDataset(inputs=inputs, labels=labels.astype(float))


def moons_class_pool(per_class: int, noise: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Rows of each moon, shared by every agent in the endowment scheme."""
    data = synthesize_moons(2 * per_class, noise, rng)
    return tuple(data.inputs[data.labels == c] for c in range(2))


def moons_endowment(pool: Tuple[np.ndarray, np.ndarray], scarce_class: int, fraction: float) -> LabeledDataset:
    """A fraction of one moon and all of the other."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"endowment fraction must lie in (0, 1], got {fraction!r}")
    blocks, labels = [], []
    for c, rows in enumerate(pool):
        keep = rows.shape[0] if c != scarce_class else max(1, int(np.ceil(fraction * rows.shape[0])))
        blocks.append(rows[:keep])
        labels.append(np.full(keep, float(c)))
    return LabeledDataset(inputs=np.vstack(blocks), labels=np.concatenate(labels))


def linear_assignment(cost) -> Tuple[int, ...]:
    """
    Exact minimum-cost assignment of rows to columns.

    Among optimal assignments the lexicographically smallest one is returned,
    found by fixing rows in order to the smallest column that still admits an
    optimal completion.

    Args:
        cost: Square matrix of finite costs

    Returns:
        perm with perm[i] the column assigned to row i

    Raises:
        DomainError: If the matrix is not square or not finite
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DomainError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix must be finite")
    n = cost.shape[0]
    if n == 0:
        return ()

    rows, cols = linear_sum_assignment(cost)
    current = cols[np.argsort(rows)].copy()
    optimum = float(cost[rows, cols].sum())
    tol = 1e-12 * (1.0 + float(np.abs(cost).sum()))

    free = set(range(n))
    prefix = 0.0
    for i in range(n):
        for j in sorted(free):
            if j == current[i]:
                break
            rest_cols = np.array(sorted(free - {j}), dtype=int)
            total = prefix + cost[i, j]
            if rest_cols.size:
                sub = cost[i + 1:][:, rest_cols]
                sub_rows, sub_cols = linear_sum_assignment(sub)
                total += float(sub[sub_rows, sub_cols].sum())
            if total <= optimum + tol:
                current[i] = j
                if rest_cols.size:
                    current[i + 1:] = rest_cols[sub_cols[np.argsort(sub_rows)]]
                break
        prefix += cost[i, current[i]]
        free.remove(int(current[i]))
    return tuple(int(j) for j in current)


def apply_permutation(params: MlpParams, perms: LayerPermutations) -> MlpParams:
    """
    Reorder hidden units without changing the function computed.

    Unit i of hidden layer l becomes old unit perms[l][i]; the next layer's
    input columns follow.

    Raises:
        ArchitectureMismatchError: If a permutation does not fit its layer
    """
    hidden = params.n_layers - 1
    if len(perms.perms) != hidden:
        raise ArchitectureMismatchError(len(perms.perms), hidden, "hidden layer count")
    for index, perm in enumerate(perms.perms):
        if len(perm) != params.weights[index].shape[0]:
            raise ArchitectureMismatchError(len(perm), params.weights[index].shape[0], f"layer {index} width")

    weights, biases = [], []
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        if index < hidden:
            rows = list(perms.perms[index])
            w, b = w[rows, :], b[rows]
        if index:
            w = w[:, list(perms.perms[index - 1])]
        weights.append(w)
        biases.append(b)
    return MlpParams(weights=weights, biases=biases)


def alignment_objective(reference: MlpParams, candidate: MlpParams, perms: LayerPermutations) -> float:
    """Inner product between the reference and the permuted candidate."""
    return float(reference.flatten().values @ apply_permutation(candidate, perms).flatten().values)


def _layer_similarity(reference: MlpParams, candidate: MlpParams, perms: List[np.ndarray], layer: int) -> np.ndarray:
    incoming = candidate.weights[layer]
    if layer:
        incoming = incoming[:, perms[layer - 1]]
    similarity = reference.weights[layer] @ incoming.T + np.outer(reference.biases[layer], candidate.biases[layer])
    outgoing = candidate.weights[layer + 1]
    if layer + 1 < len(perms):
        outgoing = outgoing[perms[layer + 1], :]
    return similarity + reference.weights[layer + 1].T @ outgoing


def weight_matching_alignment(
    reference: MlpParams,
    candidate: MlpParams,
    sweeps: int = DEFAULT_SWEEPS,
    trace: Optional[List[float]] = None,
) -> LayerPermutations:
    """
    Permute the candidate's hidden units to match the reference.

    A forward pass matches each layer on its incoming weights and biases; it
    is kept only if it scores at least as well as the identity. Coordinate
    descent then re-solves one layer at a time against its incoming and
    outgoing weights, holding the others fixed, until a full pass changes
    nothing or `sweeps` passes have run.

    Args:
        reference: Network to align to (the buyer)
        candidate: Network to permute (the seller)
        sweeps: Maximum number of coordinate-descent passes
        trace: When given, receives the objective after every update

    Returns:
        LayerPermutations to pass to apply_permutation(candidate, ...)

    Raises:
        ArchitectureMismatchError: If the networks differ in shape
    """
    if sweeps < 1:
        raise DomainError(f"sweeps must be >= 1, got {sweeps}")
    reference.require_same_architecture(candidate)
    hidden = reference.n_layers - 1
    identity = LayerPermutations.identity(reference)
    if hidden == 0:
        return identity

    def score(perms: List[np.ndarray]) -> float:
        return alignment_objective(reference, candidate, LayerPermutations(perms=[tuple(map(int, p)) for p in perms]))

    perms = [np.array(p) for p in identity.perms]
    best = score(perms)

    forward: List[np.ndarray] = []
    for layer in range(hidden):
        incoming = candidate.weights[layer]
        if layer:
            incoming = incoming[:, forward[layer - 1]]
        similarity = reference.weights[layer] @ incoming.T + np.outer(reference.biases[layer], candidate.biases[layer])
        forward.append(np.array(linear_assignment(-similarity)))
    forward_score = score(forward)
    if forward_score >= best:
        perms, best = forward, forward_score
    if trace is not None:
        trace.append(best)

    for sweep in range(sweeps):
        changed = False
        for layer in range(hidden):
            updated = np.array(linear_assignment(-_layer_similarity(reference, candidate, perms, layer)))
            if not np.array_equal(updated, perms[layer]):
                perms[layer] = updated
                changed = True
                if trace is not None:
                    trace.append(score(perms))
        if not changed:
            logger.debug(f"Weight matching converged after {sweep + 1} sweep(s)")
            break
    return LayerPermutations(perms=[tuple(int(i) for i in p) for p in perms])


def subset_merge(buyer: MlpParams, seller_aligned: MlpParams, layer_set, weight: float) -> MlpParams:
    """
    Merge the chosen layers (weight and bias together), keep the buyer's others.

    Raises:
        DomainError: If layer_set is empty or out of range, or weight is outside (0, 1]
        ArchitectureMismatchError: If the networks differ in shape
    """
    buyer.require_same_architecture(seller_aligned)
    layers = set(int(i) for i in layer_set)
    if not layers:
        raise DomainError("layer_set must not be empty")
    bad = sorted(i for i in layers if not 0 <= i < buyer.n_layers)
    if bad:
        raise DomainError(f"layer indices {bad} outside 0..{buyer.n_layers - 1}")

    weights, biases = list(buyer.weights), list(buyer.biases)
    for index in sorted(layers):
        single = MlpParams(weights=[buyer.weights[index]], biases=[buyer.biases[index]]).flatten()
        other = MlpParams(weights=[seller_aligned.weights[index]], biases=[seller_aligned.biases[index]]).flatten()
        merged = MlpParams.unflatten(merge(single, other, weight), (buyer.shapes[index],))
        weights[index], biases[index] = merged.weights[0], merged.biases[0]
    return MlpParams(weights=weights, biases=biases)
