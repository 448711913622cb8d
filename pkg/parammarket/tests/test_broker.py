"""
Tests for the broker service.

This module contains tests for merge-weight optimisation, both gain notions,
the FedAvg weight and the MLP broker.
"""

import math

import numpy as np
import pytest

from parammarket.exceptions import DimensionMismatchError, DomainError, PerfectMergeError
from parammarket.models.core import LabeledDataset, ParameterVector
from parammarket.models.market import GainKind
from parammarket.models.mlp import LayerPermutations, MlpTask
from parammarket.services import broker, mlp_align
from parammarket.services.broker import BrokerService, MlpBrokerService
from parammarket.services.core import merge


@pytest.fixture
def service(broker_data, small_task):
    """Linear broker knowing θ* of small_task."""
    return BrokerService(broker_data, theta_star=small_task.true_params)


def test_fedavg_weight_examples():
    """Test the documented FedAvg weights."""
    assert broker.fedavg_weight(500, 500) == 0.5
    assert broker.fedavg_weight(100, 300) == 0.75
    with pytest.raises(DomainError):
        broker.fedavg_weight(0, 10)


def test_closed_form_example(vector):
    """Test the one-dimensional quadratic example."""
    data = LabeledDataset(inputs=[[1.0]], labels=[1.0])
    proposal = BrokerService(data).optimize_merge_weight(vector([0.0]), vector([2.0]))
    assert proposal.weight == pytest.approx(0.5)
    assert proposal.merged.values[0] == pytest.approx(1.0)
    assert proposal.broker_loss_after == pytest.approx(0.0)
    assert proposal.broker_loss_before == 1.0


def test_seller_at_theta_star_gets_full_weight(service, small_task, rng):
    """Test that a seller holding θ* is bought outright on noiseless data."""
    buyer = ParameterVector(values=rng.standard_normal(5))
    proposal = service.optimize_merge_weight(buyer, small_task.true_params)
    assert proposal.weight == pytest.approx(1.0)
    assert proposal.broker_loss_after == pytest.approx(0.0, abs=1e-12)


def test_optimal_weight_beats_grid(service, rng):
    """Test the closed-form weight against a dense grid of merges."""
    for _ in range(20):
        buyer = ParameterVector(values=rng.standard_normal(5))
        seller = ParameterVector(values=rng.standard_normal(5))
        proposal = service.optimize_merge_weight(buyer, seller)
        grid = [service.loss(merge(buyer, seller, w)) for w in np.linspace(broker.WEIGHT_FLOOR, 1.0, 1001)]
        assert proposal.broker_loss_after <= min(grid) + 1e-9 * (1.0 + min(grid))
        assert broker.WEIGHT_FLOOR <= proposal.weight <= 1.0


def test_optimal_weight_dominates_equal_split(service, rng):
    """Test that the broker's weight is never worse than a 0.5 merge."""
    for _ in range(50):
        buyer = ParameterVector(values=rng.standard_normal(5))
        seller = ParameterVector(values=rng.standard_normal(5))
        optimal = service.optimize_merge_weight(buyer, seller)
        equal = service.fixed_merge(buyer, seller, 0.5)
        assert optimal.broker_loss_after <= equal.broker_loss_after + 1e-9
        assert optimal.broker_loss_before == pytest.approx(equal.broker_loss_before)


def test_identical_parameters_give_degenerate_proposal(service, rng):
    """Test the weight floor and zero gain for seller == buyer."""
    theta = ParameterVector(values=rng.standard_normal(5))
    proposal = service.optimize_merge_weight(theta, theta)
    assert proposal.weight == broker.WEIGHT_FLOOR
    gain = service.gain_loss_difference(theta, proposal.merged)
    assert gain.value == pytest.approx(0.0, abs=1e-12)
    assert not gain.trade_beneficial


def test_dimension_mismatch(service, vector):
    """Test that a wrong-sized vector is rejected."""
    with pytest.raises(DimensionMismatchError):
        service.optimize_merge_weight(vector([0.0] * 5), vector([0.0] * 4))


def test_gain_loss_difference_examples(service, rng):
    """Test that an unchanged merge has zero, non-beneficial gain."""
    theta = ParameterVector(values=rng.standard_normal(5))
    gain = service.gain_loss_difference(theta, theta)
    assert gain.value == 0.0
    assert not gain.trade_beneficial
    assert gain.kind == GainKind.LOSS_DIFFERENCE


def test_gain_error_ratio_examples(vector):
    """Test the documented error-ratio examples."""
    theta_star = vector([0.0, 0.0])
    assert broker.gain_error_ratio(vector([2.0, 0.0]), vector([1.0, 0.0]), theta_star).value == 4.0
    unchanged = broker.gain_error_ratio(vector([2.0, 0.0]), vector([2.0, 0.0]), theta_star)
    assert unchanged.value == 1.0
    assert not unchanged.trade_beneficial


def test_perfect_merge(service, small_task, rng):
    """Test the perfect-merge error and the unbounded gain reported for it."""
    dot = ParameterVector(values=rng.standard_normal(5))
    with pytest.raises(PerfectMergeError):
        broker.gain_error_ratio(dot, small_task.true_params, small_task.true_params)
    gain = service.gain(GainKind.ERROR_RATIO, dot, small_task.true_params)
    assert math.isinf(gain.value)
    assert gain.trade_beneficial


def test_error_ratio_needs_theta_star(broker_data, vector):
    """Test that a broker without θ* cannot report error ratios."""
    with pytest.raises(DomainError):
        BrokerService(broker_data).gain_error_ratio(vector([0.0] * 5), vector([1.0] * 5))


def test_search_merge_weight_compares_anchors():
    """Test that the bounded search falls back to the best anchor."""
    weight, value = broker.search_merge_weight(lambda w: (w - 0.3) ** 2)
    assert weight == pytest.approx(0.3, abs=1e-5)
    weight, value = broker.search_merge_weight(lambda w: -w)
    assert weight == 1.0
    assert value == -1.0


@pytest.fixture
def moons_task(rng):
    """Small two-moons broker task."""
    return MlpTask(data=mlp_align.synthesize_moons(60, 0.1, rng))


def test_mlp_broker_merges_permuted_clone(tiny_mlp, moons_task, rng):
    """Test that a permuted clone aligns back and costs nothing to merge."""
    perms = LayerPermutations(perms=[tuple(int(i) for i in rng.permutation(8)) for _ in range(2)])
    clone = mlp_align.apply_permutation(tiny_mlp, perms)
    service = MlpBrokerService(moons_task, tiny_mlp.shapes)
    aligned = service.aligned(tiny_mlp.flatten(), clone.flatten())
    np.testing.assert_allclose(aligned.flatten().values, tiny_mlp.flatten().values)
    proposal = service.optimize_merge_weight(tiny_mlp.flatten(), clone.flatten())
    assert proposal.broker_loss_after == pytest.approx(proposal.broker_loss_before, rel=1e-9)


def test_mlp_broker_never_worse_than_equal_split(tiny_mlp, moons_task, rng):
    """Test the searched weight against the 0.5 anchor."""
    seller = mlp_align.init_mlp((2, 8, 8, 2), rng)
    service = MlpBrokerService(moons_task, tiny_mlp.shapes, layer_set=[0, 2])
    proposal = service.optimize_merge_weight(tiny_mlp.flatten(), seller.flatten())
    aligned = service.aligned(tiny_mlp.flatten(), seller.flatten())
    equal = mlp_align.subset_merge(tiny_mlp, aligned, [0, 2], 0.5)
    assert proposal.broker_loss_after <= mlp_align.mlp_forward_loss(equal, moons_task.data, moons_task.kind) + 1e-12
    # Check the untouched layer is the buyer's
    merged = service.unflatten(proposal.merged)
    np.testing.assert_array_equal(merged.weights[1], tiny_mlp.weights[1])


def test_mlp_broker_without_alignment_keeps_seller(tiny_mlp, moons_task, rng):
    """Test that alignment can be switched off."""
    seller = mlp_align.init_mlp((2, 8, 8, 2), rng)
    service = MlpBrokerService(moons_task, tiny_mlp.shapes, align=False)
    assert service.aligned(tiny_mlp.flatten(), seller.flatten()) == seller
