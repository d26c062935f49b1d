"""Exception types raised across the package."""


class GPSError(Exception):
    """Base class for all package errors."""


class GraphValidationError(GPSError, ValueError):
    """A graph violates a structural or vocabulary invariant."""


class DatasetParseError(GPSError, ValueError):
    """A dataset file record could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(GPSError, ValueError):
    """An invalid configuration value or name."""


class ShapeError(GPSError, ValueError):
    """Operands of a differentiable op have incompatible shapes."""


class NumericError(GPSError, ArithmeticError):
    """A non-finite value or a failed numerical routine."""


class MaskingError(GPSError, ValueError):
    """Positions were required by the masking group but are absent."""


class OversizeGraphError(GPSError, ValueError):
    """A single graph does not fit into an empty pack."""


class CheckpointError(GPSError, ValueError):
    """A checkpoint or predictions file does not match its declared config."""


class TrainingDiverged(GPSError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)
