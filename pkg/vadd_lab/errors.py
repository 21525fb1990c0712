# vadd_lab/errors.py

"""
Error types shared by every module.

Library code raises these; only the command surface (main.py) turns
them into process exit codes.
"""

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class VaddError(Exception):
    """Base class for all vadd_lab errors."""

    exit_code = EXIT_USAGE


class ConfigurationError(VaddError):
    """Shape mismatches and invalid settings."""


class UsageError(VaddError):
    """A documented precondition was violated by the caller."""


class DataError(VaddError):
    """Missing or corrupt input files (datasets, checkpoints, configs)."""


class NumericalError(VaddError):
    """A loss or parameter went non-finite during training."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class CheckFailure(VaddError):
    """One or more oracle checks did not pass."""

    exit_code = EXIT_CHECK_FAILED
