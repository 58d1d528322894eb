"""Exception types raised across the package."""


class CascadeError(Exception):
    """Base class for all package errors."""


class ValidationError(CascadeError, ValueError):
    """A record, config or model file violates a schema invariant."""

    def __init__(self, message, *, line=None, record_id=None):
        self.line = line
        self.record_id = record_id
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if record_id is not None:
            prefix.append(f"record {record_id!r}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class SignalUnavailableError(CascadeError, ValueError):
    """An uncertainty signal cannot be computed for a record."""

    def __init__(self, message, *, record_id=None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)


class FitError(CascadeError, ValueError):
    """A calibrator cannot be fit to the given data."""


class SelectionError(CascadeError, ValueError):
    """Threshold selection was asked to work on unusable input."""


class DiagnosticUndefinedError(CascadeError, ValueError):
    """A diagnostic is undefined for the given policy and data."""


class SpecError(CascadeError, ValueError):
    """A synthetic workload spec is invalid or infeasible."""
