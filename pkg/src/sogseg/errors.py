"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class SogsegError(Exception):
    """Base class for all package errors."""


class ConfigError(SogsegError):
    """Invalid configuration or mismatched shapes/dimensions."""


class DataFormatError(SogsegError):
    """Malformed or truncated file content."""


class NumericError(SogsegError):
    """Non-finite values or a failed numeric self-check."""
