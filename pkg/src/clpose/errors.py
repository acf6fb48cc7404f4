"""Exception hierarchy.

Errors are split by who is at fault: ConfigError for bad configuration
values, ContractError for caller contract violations (mismatched shapes,
out-of-grid indices), DataError for bad input data (annotations, metadata),
and MapFormatError subclasses for malformed map files.
"""


class ClposeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ClposeError, ValueError):
    """Invalid configuration value (stride, sigma, tau, weights...)."""


class ContractError(ClposeError, ValueError):
    """A caller violated an API contract (shape/K mismatch, bad index)."""


class DataError(ClposeError, ValueError):
    """Input data is invalid (out-of-range keypoint, missing metadata...)."""


class IngestError(DataError):
    """An annotation file could not be ingested; message names the culprit."""


class MapFormatError(ClposeError, ValueError):
    """A map file is malformed."""


class BadMagicError(MapFormatError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(MapFormatError):
    """The file declares an unsupported format version."""


class PayloadSizeError(MapFormatError):
    """The payload length does not match the sizes declared in the header."""
