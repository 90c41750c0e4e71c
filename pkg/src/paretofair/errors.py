"""Exception types shared across the package."""


class ParetofairError(Exception):
    """Base class for all package errors."""


class ShapeError(ParetofairError):
    """Array dimensions do not match what an operation expects."""


class ValidationError(ParetofairError):
    """Input values violate a documented precondition."""


class ParameterError(ParetofairError):
    """A configuration scalar is out of its legal range."""


class DegenerateGroupError(ParetofairError):
    """Fewer than two usable groups, so pairwise quantities are undefined."""


class NumericError(ParetofairError):
    """A non-finite value appeared where finite math was required."""

    def __init__(self, message: str, *, component: str | None = None,
                 iteration: int | None = None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration


class DiagnosticError(ParetofairError):
    """A trace diagnostic was asked for with insufficient data."""


class SchemaError(ParetofairError):
    """Dataset schema and file contents disagree."""


class ConfigError(ParetofairError):
    """Run configuration file could not be parsed or validated."""

    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field


class DataError(ParetofairError):
    """Raw table contents could not be converted to a dataset."""
