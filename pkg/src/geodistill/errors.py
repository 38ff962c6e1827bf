"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class ConfigError(ValueError):
    """Bad configuration: unknown key, invalid value, or unreadable file."""


class FormatError(ValueError):
    """A TSR or SCN stream does not conform to its declared format."""


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its placement constraints."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value where none is allowed."""


class SkippedTargetError(ValueError):
    """Operation invoked on a target that was flagged as skipped."""
