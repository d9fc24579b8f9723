"""Exception hierarchy shared across the toolkit.

Every domain failure raises a subclass of :class:`GFMError`; the CLI maps
these to exit code 1 and everything else to a traceback.
"""


class GFMError(Exception):
    """Base class for all domain errors raised by this package."""


class ValidationError(GFMError):
    """A record, config or argument violates a documented invariant."""


class FormatError(GFMError):
    """A binary artifact does not look like the format it claims to be."""


class UnsupportedVersionError(FormatError):
    """Recognized format, unknown version."""


class CorruptionError(GFMError):
    """Truncated data or checksum mismatch in an otherwise valid format."""


class ParseError(GFMError):
    """Malformed text input; carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(GFMError):
    """Structurally parseable input missing required fields."""


class ConfigError(GFMError):
    """Invalid configuration value or combination."""


class TransportError(GFMError):
    """Communication failure between ranks/workers (timeout, bad frame)."""


class OutputExistsError(GFMError):
    """Refusing to overwrite an existing non-empty output without --force."""
