"""
Linear task models.

This module defines the Pydantic models for synthetic linear-regression tasks.
"""

from pydantic import BaseModel, ConfigDict, Field, model_validator

from parammarket.models.core import LabeledDataset, ParameterVector


class LinearTask(BaseModel):
    """One agent's data endowment for a linear-regression task."""
    model_config = ConfigDict(frozen=True)

    data: LabeledDataset = Field(..., description="Design matrix and labels")
    true_params: ParameterVector = Field(..., description="Ground truth θ*")
    noise_variance: float = Field(..., description="Label noise variance σ²", ge=0.0)

    @model_validator(mode="after")
    def validate_dimension(self):
        """Validate that θ* matches the design matrix."""
        if self.true_params.dimension != self.data.dimension:
            raise ValueError(
                f"true_params has dimension {self.true_params.dimension}, data has {self.data.dimension}"
            )
        return self


class SpectrumSummary(BaseModel):
    """Extreme eigenvalues of XᵀX and the condition number."""
    lambda_max: float = Field(..., description="Largest eigenvalue", gt=0.0)
    lambda_min: float = Field(..., description="Smallest eigenvalue", gt=0.0)
    rho: float = Field(..., description="Condition number lambda_max / lambda_min", ge=1.0)
