"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents do not match what an operation needs."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration value is invalid or incompatible with the input."""


class FormatError(ValueError):
    """A file on disk does not follow the expected layout."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class IncompatibilityError(ValueError):
    """A checkpoint does not match the requested config or the input data."""
