"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Library code raises the most specific class available.
"""


class R2SprayError(Exception):
    """Base class for all package errors."""


class ConfigError(R2SprayError):
    """Invalid or inconsistent configuration."""


class DataError(R2SprayError):
    """Malformed, missing or mismatched input data."""


class NumericError(R2SprayError):
    """Numerical failure (divergence, non-finite values, degeneracy)."""


class GridMismatchError(DataError):
    """Volumes that must share dims/spacing/affine do not."""


class NiftiError(DataError):
    """Base class for NIfTI file problems."""


class BadMagicError(NiftiError):
    """File does not carry the single-file NIfTI-1 magic."""


class UnsupportedDatatypeError(NiftiError):
    """Datatype code outside the supported set."""


class TruncatedFileError(NiftiError):
    """File shorter than the header or the declared data section."""
