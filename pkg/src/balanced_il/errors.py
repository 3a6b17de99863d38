"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class InvalidLabelError(ValueError):
    """A label is out of range or refers to a class with zero weight."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
