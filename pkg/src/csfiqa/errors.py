"""Exception hierarchy shared by every CSFIQA module."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CsfiqaError(Exception):
    """Base exception for CSFIQA errors."""

    exit_code = EXIT_NUMERIC


class ConfigError(CsfiqaError):
    """Invalid configuration value, unknown config key, or incompatible sizes."""

    exit_code = EXIT_USAGE


class DataError(CsfiqaError):
    """Missing file, malformed manifest row, non-finite label, unwritable directory."""

    exit_code = EXIT_DATA


class DimensionError(CsfiqaError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InvalidMaskError(CsfiqaError, ValueError):
    """A masked softmax slice has no kept entry."""


class ZeroVectorError(CsfiqaError, ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class NumericError(CsfiqaError):
    """Non-finite loss or gradient."""


class GradCheckError(NumericError):
    """Finite-difference check failed or hit a non-finite evaluation."""


class MetricError(NumericError):
    """Correlation is undefined (zero variance)."""


class TrainingAbort(NumericError):
    """Training failed inside a protocol repeat."""

    def __init__(self, repeat: int, cause: Exception):
        super().__init__(f"repeat {repeat}: {cause}")
        self.repeat = repeat
        self.cause = cause
