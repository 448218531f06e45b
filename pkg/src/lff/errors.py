"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a documented precondition."""


class DomainError(ValueError):
    """A scalar argument lies outside its admissible range."""


class FormatError(ValueError):
    """A serialized file does not follow the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class UndefinedCorrelation(DomainError):
    """Pearson correlation is undefined because one side has zero variance."""
