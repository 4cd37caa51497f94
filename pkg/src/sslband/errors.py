"""Exception types shared across the package.

The CLI maps each class to its own exit code.
"""


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes."""


class FormatError(ValueError):
    """Malformed cube, manifest, checkpoint or trace file."""

    def __init__(self, message: str, offset: int | None = None):
        self.detail = message
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""
