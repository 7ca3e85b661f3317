"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent configuration."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward() from a non-scalar)."""


class NonFiniteError(ArithmeticError):
    """A NaN/Inf was produced or encountered where the contract forbids it."""


class FormatError(ValueError):
    """Malformed on-disk container. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricUndefined(ValueError):
    """Requested metric is undefined for the given inputs (degenerate data)."""
