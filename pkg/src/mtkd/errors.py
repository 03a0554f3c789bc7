"""Exception hierarchy shared by every mtkd module."""


class MtkdError(Exception):
    """Base class for all mtkd errors."""


class DimensionError(MtkdError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(MtkdError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class NumericError(MtkdError, ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class ContractError(MtkdError, RuntimeError):
    """A caller violated an operation's precondition."""


class InputError(MtkdError, ValueError):
    """Model input (token ids, masks) is invalid."""


class ConfigError(MtkdError, ValueError):
    """A configuration value is missing or inconsistent."""


class IntegrityError(MtkdError, IOError):
    """A serialized file failed validation."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(MtkdError, ArithmeticError):
    """A training phase produced a non-finite loss."""

    def __init__(self, phase: str, message: str = "non-finite loss"):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
