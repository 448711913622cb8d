"""
Core market models.

This module defines the Pydantic models shared by every service: the traded
parameter vector, labelled datasets and the loss convention.
"""

from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from parammarket.exceptions import DimensionMismatchError


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimension(s), got {array.ndim}")
    if array.size == 0:
        raise ValueError(f"{name} must not be empty")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} must contain only finite values")
    array.setflags(write=False)
    return array


class LossKind(str, Enum):
    """Loss reduction enumeration."""
    SUM_OF_SQUARES = "sum-of-squares"
    MEAN_PER_SAMPLE = "mean-per-sample"


class LossSpec(BaseModel):
    """Loss convention used for empirical losses and their gradients."""
    model_config = ConfigDict(frozen=True)

    kind: LossKind = Field(LossKind.SUM_OF_SQUARES, description="Sum of squares or mean per sample")

    def scale(self, n_samples: int) -> float:
        """Factor applied to a summed loss."""
        return 1.0 if self.kind == LossKind.SUM_OF_SQUARES else 1.0 / n_samples


class ParameterVector(BaseModel):
    """Flat real-valued parameter set, the traded commodity."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(..., description="Parameter values, finite, fixed dimension")

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, values):
        """Copy into a read-only float64 vector."""
        return _frozen_array(values, 1, "values")

    @field_serializer("values")
    def serialize_values(self, values: np.ndarray):
        return values.tolist()

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    def require_dimension(self, dimension: int) -> None:
        """
        Check this vector against an expected dimension.

        Raises:
            DimensionMismatchError: If the dimensions differ
        """
        if self.dimension != dimension:
            raise DimensionMismatchError(self.dimension, dimension)

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        other.require_dimension(self.dimension)
        return ParameterVector(values=self.values + other.values)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        other.require_dimension(self.dimension)
        return ParameterVector(values=self.values - other.values)

    def scale(self, factor: float) -> "ParameterVector":
        return ParameterVector(values=factor * self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))


class LabeledDataset(BaseModel):
    """Design matrix with one label per row."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray = Field(..., description="n x d input matrix")
    labels: np.ndarray = Field(..., description="Length-n label vector")

    @field_validator("inputs", mode="before")
    @classmethod
    def validate_inputs(cls, inputs):
        return _frozen_array(inputs, 2, "inputs")

    @field_validator("labels", mode="before")
    @classmethod
    def validate_labels(cls, labels):
        return _frozen_array(labels, 1, "labels")

    @model_validator(mode="after")
    def validate_rows(self):
        """Validate that every input row has a label."""
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs have {self.inputs.shape[0]} rows but there are {self.labels.shape[0]} labels"
            )
        return self

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.inputs.shape[1])

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        """Same inputs (shared, not copied), new labels."""
        labels = _frozen_array(labels, 1, "labels")
        if labels.shape[0] != self.n_samples:
            raise DimensionMismatchError(labels.shape[0], self.n_samples, "label count")
        return self.model_copy(update={"labels": labels})
