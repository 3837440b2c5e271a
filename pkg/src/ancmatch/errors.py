"""Exception taxonomy shared by every module.

Each error kind maps to one stable machine-readable ``kind`` string so the
CLI can emit a single structured line per failure.
"""


class AncError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class InvalidArgumentError(AncError):
    """A caller-supplied value violates an operation's precondition."""

    kind = "invalid-argument"


class FormatError(AncError):
    """A file or manifest does not match its declared layout."""

    kind = "format-error"


class IoError(AncError):
    """An underlying read/write failed; message carries the path."""

    kind = "io-error"


class NumericError(AncError):
    """A computation produced or received non-finite values."""

    kind = "numeric-error"


class GenerationError(AncError):
    """Synthetic data generation could not satisfy its constraints."""

    kind = "generation-error"
