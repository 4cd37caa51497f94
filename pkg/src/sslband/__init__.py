"""Spectral band selection by group-sparse first-layer training of a small CNN."""

from .errors import ConfigError, FormatError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "NumericalError", "__version__"]
