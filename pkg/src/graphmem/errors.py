"""Exception types shared across the package.

Every error raised on a contract violation names the offending object and
field so callers can repair inputs without reading a traceback.
"""


class GraphMemError(Exception):
    """Base class for all package errors."""


class ValidationError(GraphMemError):
    """An input value violates a structural invariant (shape, range, key)."""


class GraphValidationError(ValidationError):
    """A graph violates its construction invariants."""


class ParameterError(GraphMemError):
    """A hyperparameter is outside its documented range."""


class ParseError(GraphMemError):
    """A file on disk cannot be decoded into the expected format."""


class ConfigError(GraphMemError):
    """A run configuration or episode request is internally inconsistent."""


class NumericalError(GraphMemError):
    """A computation produced non-finite values."""


class EmbeddingLookupError(GraphMemError):
    """A text has no entry in a fixed external embedding table."""
