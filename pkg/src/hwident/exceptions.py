"""Exception hierarchy shared by the pipeline stages.

Each class maps onto one CLI exit code, see :mod:`hwident.cli`.
"""


class HWIdentError(Exception):
    """Base class for all package errors."""


class ConfigError(HWIdentError, ValueError):
    """Invalid run configuration or estimator/structure settings."""


class DataError(HWIdentError, ValueError):
    """Malformed or inconsistent signal data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(HWIdentError, RuntimeError):
    """A simulation left the bounded region or produced non-finite values."""

    def __init__(self, message, time=None):
        if time is not None:
            message = f"{message} (t = {time:.6g} s)"
        super().__init__(message)
        self.time = time


class LockError(DivergenceError):
    """The phase-locked loop failed to align with the grid voltage."""


class SearchExhaustedError(HWIdentError, RuntimeError):
    """No candidate passed the validation cascade."""

    def __init__(self, message, rejections=()):
        super().__init__(message)
        self.rejections = list(rejections)


class ValidationFailure(HWIdentError, RuntimeError):
    """A fitted model failed one or more validation checks."""

    def __init__(self, message, failed_checks=()):
        super().__init__(message)
        self.failed_checks = list(failed_checks)
