"""Exception types shared across the pipeline.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class DygError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(DygError):
    """Invalid configuration, bad CLI arguments, or missing input files."""


class ParseError(ConfigError):
    """Malformed input file. Carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataIOError(DygError):
    """Failure reading or writing a binary artifact (cache, checkpoint, features)."""


class NumericError(DygError):
    """Non-finite values or degenerate numerics encountered during training."""
