"""Self-information-domain temporal CSI compression at desk scale."""

from .errors import ConfigError, DataError, DimensionError, NumericalError

__all__ = ["ConfigError", "DataError", "DimensionError", "NumericalError"]

__version__ = "0.1.0"
