"""Exception and warning types shared across the package."""


class ThickSprayError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class NumericInputError(ThickSprayError, ValueError):
    """Non-finite or otherwise unusable numerical input."""


class ResolutionError(ThickSprayError, ValueError):
    """Requested quantity is not resolved by the grid."""


class ConfigError(ThickSprayError, ValueError):
    """Invalid configuration or parameters.

    Parameters
    ----------
    messages : str or list of str
        One message per violation.
    """

    exit_code = 1

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class BoundError(ThickSprayError):
    """A pointwise bound on the densities is violated."""

    exit_code = 2


class VacuumError(BoundError):
    """Density reached zero or became negative."""


class TailError(BoundError):
    """Velocity tail mass exceeds the configured tolerance."""


class StabilityError(ThickSprayError):
    """Initial data fail the required Penrose margin."""

    exit_code = 2


class HorizonError(ThickSprayError):
    """Straightening fixed point failed to contract."""

    exit_code = 2


class DomainError(ThickSprayError, ValueError):
    """Force field queried outside its time interval."""

    exit_code = 1


class DivergenceError(ThickSprayError):
    """Numerical blow-up detected."""

    exit_code = 3


class ConvergenceWarning(UserWarning):
    """Iterative estimate stopped before reaching its tolerance."""
