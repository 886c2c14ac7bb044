"""Exception hierarchy shared across the package.

The CLI maps ``ValidationError`` subclasses to exit code 1 and
``NumericalError`` to exit code 2.
"""


class DiffuminError(Exception):
    pass


class ValidationError(DiffuminError):
    """Bad input: configuration, dataset or checkpoint contents."""


class ConfigError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ContractError(DiffuminError):
    pass


class UndefinedMetricError(ValidationError):
    pass


class IngestionError(ValidationError):
    """Dataset record could not be ingested.

    ``line`` is 1-based when the failure is tied to a file position.
    """

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedLineError(IngestionError):
    pass


class MissingKeyError(IngestionError):
    pass


class IdOverflowError(IngestionError):
    pass


class RecordValueError(IngestionError):
    pass


class NumericalError(DiffuminError):
    pass


class ZeroBaselineError(UndefinedMetricError, ZeroDivisionError):
    """Relative improvement against a base AUC of exactly 0.5."""
