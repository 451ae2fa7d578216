"""Exception hierarchy shared across the toolkit."""


class UltrLabError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(UltrLabError, ValueError):
    """Input or configuration violates a contract."""


class ParseError(ValidationError):
    """A data file could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(UltrLabError, RuntimeError):
    """Numerical failure during optimisation (non-finite loss or gradient)."""

    def __init__(self, message, batch_index=None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)
