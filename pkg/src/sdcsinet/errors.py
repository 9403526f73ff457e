"""Shared exception types. CLI maps these to exit codes (2/3/4)."""


class DimensionError(ValueError):
    """Tensor/array shapes incompatible with an operation."""


class ConfigError(ValueError):
    """Bad experiment configuration or file schema. Exit code 2."""


class DataError(ValueError):
    """Corrupt or incompatible data file / payload. Exit code 3."""


class NumericalError(RuntimeError):
    """Training diverged (NaN/Inf loss). Exit code 4."""
