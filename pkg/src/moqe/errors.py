"""Exception hierarchy shared by all moqe modules.

Exit-code mapping used by the CLI: ConfigError -> 2, DependencyError -> 3,
NumericError (and subclasses) -> 4, everything else -> 1.
"""


class MoqeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MoqeError):
    """Tensor shapes incompatible for the requested operation."""


class ConfigError(MoqeError):
    """Invalid configuration value or combination."""


class DataError(MoqeError):
    """Invalid input data (non-finite values, empty slices, bad labels)."""


class ContractError(MoqeError):
    """An operation precondition was violated by the caller."""


class NumericError(MoqeError):
    """Numeric failure at runtime (divergence, NaN loss)."""


class TrainingError(NumericError):
    """Training diverged; carries the failing step index when known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RegistrationError(MoqeError):
    """Expert registry rejected a registration."""


class IntegrityError(MoqeError):
    """Checkpoint or payload failed a digest check."""


class CapacityError(MoqeError):
    """Fast-memory capacity too small for the configured models."""


class DependencyError(MoqeError):
    """A pipeline stage is missing an upstream artifact."""
