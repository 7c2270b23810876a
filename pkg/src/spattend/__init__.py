"""Attention-driven spatially recurrent bilinear networks on numpy."""

from .errors import (AlignmentError, ConfigError, DataError, DimensionError, DivergenceError, SpattendError,
                     SpecError, TapeError)

__version__ = "0.1.0"

__all__ = ["AlignmentError", "ConfigError", "DataError", "DimensionError", "DivergenceError", "SpattendError",
           "SpecError", "TapeError", "__version__"]
