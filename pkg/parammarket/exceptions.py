"""
Market errors.

This module defines the exceptions raised by the services. Each class also
derives from the builtin the caller would naturally catch (ValueError for bad
input, RuntimeError for failures during a run).
"""

from typing import Optional


class MarketError(Exception):
    """Base class for every error raised by the market services."""


class DimensionMismatchError(MarketError, ValueError):
    """Two operands disagree on their dimension."""

    def __init__(self, left: int, right: int, what: str = "dimension"):
        self.left = left
        self.right = right
        super().__init__(f"{what} mismatch: {left} != {right}")


class ArchitectureMismatchError(DimensionMismatchError):
    """Two layered models do not share the same layer shapes."""


class DomainError(MarketError, ValueError):
    """An argument lies outside the domain of an operation."""


class SingularMatrixError(MarketError, ValueError):
    """The Gram matrix of a design is not positive definite."""


class PerfectMergeError(MarketError, ArithmeticError):
    """The merged parameters coincide with the true parameters."""

    def __init__(self, error_before: float):
        self.error_before = error_before
        super().__init__(f"Merged parameters reach the true parameters (error before merge {error_before!r})")


class DivergenceError(MarketError, RuntimeError):
    """A gradient step or loss evaluation produced non-finite values."""

    def __init__(self, round_index: Optional[int], detail: str = "non-finite values"):
        self.round_index = round_index
        self.detail = detail
        where = "" if round_index is None else f" in round {round_index}"
        super().__init__(f"Divergence{where}: {detail}")


class ConfigError(MarketError, ValueError):
    """A run configuration violates the schema."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.message = message
        self.line = line
        self.field = field
        location = ""
        if line is not None:
            location += f"line {line}: "
        if field is not None:
            location += f"{field}: "
        super().__init__(f"{location}{message}")
