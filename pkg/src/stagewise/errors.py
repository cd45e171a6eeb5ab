"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes or lengths do not agree."""


class DomainError(ValueError):
    """An argument lies outside the set where the operation is defined."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """A configuration value or document is invalid."""
