"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(ValueError):
    """A configuration cannot produce a valid network or dataset."""


class UninitializedStatisticsError(RuntimeError):
    """Batch-norm inference was requested before any training-mode call."""


class NonFiniteError(FloatingPointError):
    """A loss, activation or gradient contained NaN or Inf."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated or incompatible."""


class FormatError(ValueError):
    """An image file does not follow the supported PGM layout."""
