"""Exception types shared across the package.

The CLI maps every OodbenchError to exit code 1; argument/usage problems
are handled by argparse and exit with code 2.
"""


class OodbenchError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OodbenchError):
    """A data invariant is violated (non-finite value, zero vector, duplicate id, ...)."""


class FormatError(OodbenchError):
    """A binary embedding file is structurally invalid (bad magic, version, trailing bytes)."""


class TruncationError(FormatError):
    """An embedding file ends before its declared payload."""

    def __init__(self, what: str, expected: int, actual: int):
        super().__init__(f"truncated file while reading {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class ManifestParseError(OodbenchError):
    """A manifest line cannot be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ShapeError(OodbenchError):
    """Operands have incompatible dimensions."""


class DomainError(OodbenchError):
    """A value is outside the mathematical domain of an operation."""


class ConfigurationError(OodbenchError):
    """An evaluation request is inconsistent (vocabulary mismatch, bad sweep values, ...)."""
