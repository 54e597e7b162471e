"""Exception hierarchy shared by every diffcap module."""


class DiffCapError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffCapError, ValueError):
    """Invalid configuration value or incompatible hyperparameters."""


class DimensionError(DiffCapError, ValueError):
    """Tensor shapes do not line up."""


class RangeError(DiffCapError, IndexError):
    """Index (timestep, token id) outside its valid range."""


class NumericGuardError(DiffCapError, ArithmeticError):
    """A numeric precondition failed, e.g. a negative radicand."""


class NaNLossError(NumericGuardError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IngestionError(DiffCapError):
    """Dataset files are missing, empty or inconsistent."""


class CodecError(DiffCapError, ValueError):
    """Token ids or vocabulary files are malformed."""


class EvalError(DiffCapError, ValueError):
    """Evaluation corpus cannot be scored."""


class GenerationError(DiffCapError):
    """Inference produced non-finite values."""


class CheckpointError(DiffCapError):
    """Checkpoint file is malformed."""
