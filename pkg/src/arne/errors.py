"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """A configuration value is outside its supported range."""


class FormatError(ValueError):
    """A serialized file is malformed, truncated, or of the wrong kind."""


class GenerationError(RuntimeError):
    """Matrix generation exhausted its retry budget."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where training cannot continue."""
