"""Exception types shared across the package."""


class SpattendError(Exception):
    """Base class for all package errors."""


class DimensionError(SpattendError, ValueError):
    """Array shapes do not conform."""


class AlignmentError(DimensionError):
    """Two feature grids differ by more than one row/column."""


class TapeError(SpattendError, RuntimeError):
    """Misuse of the differentiation tape (e.g. backward on an empty tape)."""


class ConfigError(SpattendError, ValueError):
    """Invalid experiment or module configuration.

    ``key`` names the offending configuration entry when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class SpecError(ConfigError):
    """Invalid synthetic dataset specification."""


class DataError(SpattendError, ValueError):
    """Training or evaluation data is unusable."""


class DivergenceError(SpattendError, FloatingPointError):
    """Loss or a parameter became non-finite during training."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter
