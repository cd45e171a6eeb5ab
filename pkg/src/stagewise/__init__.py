"""Stage-wise learning of sparse attention patterns: data, model, flows and checks."""

from .errors import ConfigError, DimensionError, DomainError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "DomainError", "NumericError", "__version__"]
