"""Exception hierarchy and process exit codes."""
from __future__ import annotations

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4


class VerdictError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_FAILURE


class ConfigError(VerdictError):
    """Invalid configuration value, unknown template, bad grid, etc."""

    exit_code = EXIT_CONFIG


class DataFormatError(VerdictError):
    """Malformed or contract-violating input data."""

    exit_code = EXIT_DATA


class ContractViolation(VerdictError):
    """An internal interface contract was broken (dim mismatch, bad lengths)."""

    exit_code = EXIT_DATA


class InvalidGraphError(VerdictError):
    """Control-flow graph counts that cannot describe a function."""

    exit_code = EXIT_DATA


class NoEvidenceError(VerdictError):
    """An operation that requires evidence received none."""

    exit_code = EXIT_DATA


class NoSignalError(VerdictError):
    """Both embedding streams are empty; the record cannot be represented."""

    exit_code = EXIT_DATA


class IntegrityError(VerdictError):
    """A persisted artifact is corrupt or truncated."""

    exit_code = EXIT_DATA


class VersionMismatchError(IntegrityError):
    """A persisted artifact uses an unsupported format version."""


class TransportError(VerdictError):
    """A remote endpoint could not be reached or returned garbage."""

    exit_code = EXIT_TRANSPORT

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts
