"""Exception hierarchy shared by the library and the experiment CLI."""

from typing import Any


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class NetworkError(ValueError):
    """Invalid network topology."""


class BasisMismatchError(ValueError):
    """A persisted reduced basis does not belong to the configured model."""


class NumericalError(RuntimeError):
    """A numerical procedure failed or produced unusable values."""


class IntegrationError(NumericalError):
    """Time stepping failed (singular step matrix or non-finite state)."""


class EigenSolverError(NumericalError):
    """The Poincare eigenproblem could not be solved."""


class GreedyStagnationError(NumericalError):
    """The greedy loop stopped making progress.

    The partially trained state is kept on the exception so callers can still
    persist the history up to the point of failure.
    """

    def __init__(self, message: str, state: Any = None):
        super().__init__(message)
        self.state = state


class RigorViolationError(RuntimeError):
    """An error bound fell below the true error."""
