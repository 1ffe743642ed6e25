"""Exception hierarchy shared across the package.

``DataError`` subclasses map to CLI exit code 2 (bad or missing data);
everything else propagates normally.
"""


class DataError(Exception):
    """Base class for problems with input data or on-disk artifacts."""


class ManifestParseError(DataError):
    """Malformed manifest/listing row. Carries a 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(DataError):
    """Structurally valid input that violates a contract (duplicate id, bad fold, ...)."""


class StoreFormatError(DataError):
    """Corrupt, truncated, or incompatible vector-store file."""


class CheckpointError(DataError):
    """Corrupt, truncated, or tampered model checkpoint."""


class MissingVectorError(DataError):
    """External feature source has no vector for a requested record/part."""
