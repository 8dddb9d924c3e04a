"""Exception hierarchy. CLI exit codes key off these classes."""


class UniSSDAError(Exception):
    exit_code = 1


class ConfigError(UniSSDAError, ValueError):
    exit_code = 2


class DataError(UniSSDAError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class LabelError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericalAbort(UniSSDAError, FloatingPointError):
    """Raised when a loss turns non-finite; carries a diagnostic snapshot."""

    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
