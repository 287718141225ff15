"""Exception types shared across the package."""


class GrcError(Exception):
    """Base class for all package errors."""


class ConfigError(GrcError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DimensionError(GrcError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class CacheStateError(GrcError, RuntimeError):
    """Operation not permitted in the cache's current state (e.g. update while frozen)."""


class TapeError(GrcError, RuntimeError):
    """Misuse of the autodiff tape, such as replaying a consumed tape."""


class DataError(GrcError, ValueError):
    """Malformed task data, e.g. token ids outside the vocabulary."""


class NumericError(GrcError, ArithmeticError):
    """Non-finite values encountered during training or gradient checking."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OracleError(GrcError, RuntimeError):
    """The reference oracle was asked for something outside its documented range."""


class CheckpointError(GrcError, IOError):
    """Checkpoint file could not be read or is corrupt."""


class FileFormatError(GrcError, IOError):
    """An input file (metrics CSV, lambda CSV) is malformed."""
