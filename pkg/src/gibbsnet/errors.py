"""Exception types shared across the package."""

from .diffcore import ContractError, DimensionError


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class FormatError(ValueError):
    """A file does not follow its expected binary or text layout."""


class NumericError(ArithmeticError):
    """An iterative computation failed to converge or produced non-finite values."""


class InvariantError(ValueError):
    """An input object violates one of its structural invariants."""


class UnsupportedError(TypeError):
    """Operation is not defined for the given kind of input."""


class CorruptCheckpointError(FormatError):
    """Checkpoint content does not match its recorded hash."""


class TrainingDiverged(NumericError):
    """A loss became non-finite during training."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


__all__ = [
    "ConfigError", "ContractError", "CorruptCheckpointError", "DimensionError",
    "FormatError", "InvariantError", "NumericError", "TrainingDiverged",
    "UnsupportedError",
]
