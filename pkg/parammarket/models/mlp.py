"""
Multilayer perceptron models.

This module defines the layered parameter container, hidden-unit permutations
and MLP training tasks.
"""

from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from parammarket.exceptions import ArchitectureMismatchError
from parammarket.models.core import LabeledDataset, ParameterVector


class TaskKind(str, Enum):
    """Output head of an MLP task."""
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


def _read_only(array) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError("MLP parameters must be finite")
    array.setflags(write=False)
    return array


class MlpParams(BaseModel):
    """Weights and biases of a ReLU multilayer perceptron."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: List[np.ndarray] = Field(..., description="Weight matrices, h_out x h_in")
    biases: List[np.ndarray] = Field(..., description="Bias vectors, length h_out")

    @field_validator("weights", "biases", mode="before")
    @classmethod
    def validate_arrays(cls, arrays):
        return [_read_only(a) for a in arrays]

    @model_validator(mode="after")
    def validate_chain(self):
        """Validate that consecutive layer dimensions chain."""
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix and at least one layer")
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ValueError(f"layer {index}: weight {w.shape} and bias {b.shape} do not match")
            if index and w.shape[1] != self.weights[index - 1].shape[0]:
                raise ValueError(f"layer {index} takes {w.shape[1]} inputs, previous layer emits {self.weights[index - 1].shape[0]}")
        return self

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def shapes(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(w.shape for w in self.weights)

    @property
    def widths(self) -> Tuple[int, ...]:
        """Input width followed by every layer's output width."""
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def require_same_architecture(self, other: "MlpParams") -> None:
        if self.shapes != other.shapes:
            raise ArchitectureMismatchError(self.n_layers, other.n_layers, f"architecture {self.shapes} vs {other.shapes}")

    def flatten(self) -> ParameterVector:
        """Concatenate every layer's weight then bias."""
        return ParameterVector(values=np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)]))

    @classmethod
    def unflatten(cls, vector: ParameterVector, shapes: Tuple[Tuple[int, int], ...]) -> "MlpParams":
        """Inverse of flatten for the given layer shapes."""
        expected = sum(rows * cols + rows for rows, cols in shapes)
        if vector.dimension != expected:
            raise ArchitectureMismatchError(vector.dimension, expected)
        weights, biases, offset = [], [], 0
        for rows, cols in shapes:
            weights.append(vector.values[offset:offset + rows * cols].reshape(rows, cols))
            offset += rows * cols
            biases.append(vector.values[offset:offset + rows])
            offset += rows
        return cls(weights=weights, biases=biases)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpParams):
            return NotImplemented
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


class LayerPermutations(BaseModel):
    """One permutation of output units per hidden layer."""
    model_config = ConfigDict(frozen=True)

    perms: List[Tuple[int, ...]] = Field(..., description="perms[l][i] is the old unit placed at position i")

    @field_validator("perms")
    @classmethod
    def validate_bijections(cls, perms):
        for index, perm in enumerate(perms):
            if sorted(perm) != list(range(len(perm))):
                raise ValueError(f"permutation {index} is not a bijection on {len(perm)} units")
        return perms

    @classmethod
    def identity(cls, params: MlpParams) -> "LayerPermutations":
        return cls(perms=[tuple(range(w.shape[0])) for w in params.weights[:-1]])

    def inverse(self) -> "LayerPermutations":
        return LayerPermutations(perms=[tuple(int(i) for i in np.argsort(perm)) for perm in self.perms])

    @property
    def is_identity(self) -> bool:
        return all(perm == tuple(range(len(perm))) for perm in self.perms)


class MlpTask(BaseModel):
    """One agent's data and output head for an MLP."""
    model_config = ConfigDict(frozen=True)

    data: LabeledDataset = Field(..., description="Inputs and labels (class indices for classification)")
    kind: TaskKind = Field(TaskKind.CLASSIFICATION, description="Output head")
    n_outputs: int = Field(2, description="Output width", ge=1)
