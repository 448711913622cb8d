"""
Tests for the core models and services.

This module contains tests for parameter vectors, datasets, losses, gradient
steps and the merge rule.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from parammarket.exceptions import DimensionMismatchError, DivergenceError, DomainError
from parammarket.models.core import LabeledDataset, LossKind, LossSpec, ParameterVector
from parammarket.services.core import empirical_loss, gradient, gradient_step, merge
from parammarket.services.linear_task import lipschitz_constant

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)


def test_parameter_vector_rejects_non_finite():
    """Test that NaN and infinite entries are rejected."""
    with pytest.raises(ValidationError):
        ParameterVector(values=[1.0, float("nan")])
    with pytest.raises(ValidationError):
        ParameterVector(values=[float("inf")])
    with pytest.raises(ValidationError):
        ParameterVector(values=[])


def test_parameter_vector_is_read_only():
    """Test that stored values cannot be modified in place."""
    theta = ParameterVector(values=[1.0, 2.0])
    with pytest.raises(ValueError):
        theta.values[0] = 3.0


def test_parameter_vector_compares_by_value(vector):
    """Test value equality on vectors, which are not usable as set members."""
    assert vector([1.0, 2.0]) == vector([1.0, 2.0])
    assert vector([1.0, 2.0]) != vector([1.0, 2.5])
    with pytest.raises(TypeError):
        hash(vector([1.0, 2.0]))


def test_parameter_vector_arithmetic_checks_dimension(vector):
    """Test that arithmetic needs equal dimensions."""
    assert (vector([1.0, 2.0]) + vector([3.0, 4.0])) == vector([4.0, 6.0])
    with pytest.raises(DimensionMismatchError):
        vector([1.0]) + vector([1.0, 2.0])


def test_dataset_row_count():
    """Test that inputs and labels must agree on n."""
    with pytest.raises(ValidationError):
        LabeledDataset(inputs=np.ones((3, 2)), labels=np.ones(2))


def test_empirical_loss_examples(vector):
    """Test the documented loss examples."""
    data = LabeledDataset(inputs=np.eye(2), labels=[1.0, 1.0])
    # Check perfect fit
    assert empirical_loss(vector([1.0, 1.0]), data) == 0.0
    # Check the sum-of-squares value
    assert empirical_loss(vector([0.0, 0.0]), data) == 2.0
    assert empirical_loss(vector([0.0, 0.0]), data, LossSpec(kind=LossKind.MEAN_PER_SAMPLE)) == 1.0


def test_empirical_loss_dimension_mismatch(vector):
    """Test that a wrong dimension is reported."""
    data = LabeledDataset(inputs=np.eye(2), labels=[1.0, 1.0])
    with pytest.raises(DimensionMismatchError):
        empirical_loss(vector([1.0, 2.0, 3.0]), data)


def test_gradient_step_decreases_loss(small_task, rng):
    """Test the descent property for η = 1/L."""
    spec = LossSpec()
    step = 1.0 / lipschitz_constant(small_task.data, spec)
    theta = ParameterVector(values=rng.standard_normal(5))
    for _ in range(10):
        updated = gradient_step(theta, small_task.data, step, spec)
        assert empirical_loss(updated, small_task.data) <= empirical_loss(theta, small_task.data)
        theta = updated


def test_gradient_step_fixed_point(small_task):
    """Test that the least-squares solution is a fixed point."""
    solution, *_ = np.linalg.lstsq(small_task.data.inputs, small_task.data.labels, rcond=None)
    theta = ParameterVector(values=solution)
    updated = gradient_step(theta, small_task.data, 1e-3)
    np.testing.assert_allclose(updated.values, solution, atol=1e-10)
    assert np.linalg.norm(gradient(theta, small_task.data)) < 1e-8


def test_gradient_step_rejects_bad_step(small_task):
    """Test that η must be positive."""
    with pytest.raises(DomainError):
        gradient_step(ParameterVector(values=np.zeros(5)), small_task.data, 0.0)


def test_gradient_step_divergence_reports_round(small_task, caplog):
    """Test that an overflowing step raises a divergence error with its round."""
    theta = ParameterVector(values=np.full(5, 1e200))
    with pytest.raises(DivergenceError) as excinfo:
        gradient_step(theta, small_task.data, 1e200, round_index=7)
    assert excinfo.value.round_index == 7
    assert "round 7" in caplog.text


def test_merge_examples(vector):
    """Test the documented merge examples."""
    assert merge(vector([0.0, 0.0]), vector([2.0, 4.0]), 0.5) == vector([1.0, 2.0])
    assert merge(vector([1.0, 1.0]), vector([3.0, 5.0]), 1.0) == vector([3.0, 5.0])
    with pytest.raises(DomainError):
        merge(vector([1.0]), vector([2.0]), 0.0)
    with pytest.raises(DomainError):
        merge(vector([1.0]), vector([2.0]), 1.5)
    with pytest.raises(DimensionMismatchError):
        merge(vector([1.0]), vector([1.0, 2.0]), 0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6), st.floats(min_value=1e-6, max_value=1.0))
def test_merge_of_equal_vectors_is_identity(values, weight):
    """Test merge(θ, θ, w) == θ for every weight."""
    theta = ParameterVector(values=values)
    assert merge(theta, theta, weight) == theta


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=1, max_value=5).flatmap(
        lambda d: st.tuples(st.lists(finite, min_size=d, max_size=d), st.lists(finite, min_size=d, max_size=d))
    ),
    st.floats(min_value=1e-6, max_value=1.0),
)
def test_merge_lies_between_endpoints(pair, weight):
    """Test that every coordinate of a merge lies between the two parents."""
    buyer, seller = ParameterVector(values=pair[0]), ParameterVector(values=pair[1])
    merged = merge(buyer, seller, weight).values
    low = np.minimum(buyer.values, seller.values)
    high = np.maximum(buyer.values, seller.values)
    slack = 1e-9 * (1.0 + np.maximum(np.abs(low), np.abs(high)))
    assert np.all(merged >= low - slack)
    assert np.all(merged <= high + slack)
