"""Exception hierarchy shared by all modules."""
from __future__ import annotations


class FimspectraError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(FimspectraError):
    """An argument is outside the mathematical domain of an operation."""


class NumericalError(FimspectraError):
    """A computation produced non-finite values or a solver failed."""


class ShapeError(FimspectraError):
    """Array dimensions do not match the network architecture."""


class ParameterizationError(FimspectraError):
    """An operation requires a differently parameterized network."""


class DivergenceError(FimspectraError):
    """A training simulation diverged.

    Carries the step index at which the loss exceeded the divergence
    threshold.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ConfigError(FimspectraError):
    """An experiment configuration file is invalid."""
