"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RuntimeError):
    """A computation produced or received non-finite values."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent."""


class NanLossError(NumericError):
    """Training loss became non-finite; carries the failing step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
