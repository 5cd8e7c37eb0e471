"""Exception hierarchy shared by every subsystem."""


class HsslError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HsslError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(DimensionError):
    """A token count or spatial layout cannot be arranged as requested."""


class ParameterError(HsslError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class ContractError(HsslError, ValueError):
    """A precondition on the inputs of an operation does not hold."""


class ConfigError(HsslError, ValueError):
    """A model, run or schema configuration is invalid."""

    def __init__(self, message, keys=None):
        super().__init__(message)
        self.keys = list(keys or [])


class PolicyError(ConfigError):
    """An augmentation policy cannot produce valid views."""


class NumericalError(HsslError, ArithmeticError):
    """A computation produced a non-finite value."""


class UndefinedMetricError(HsslError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty denominator)."""


class FormatError(HsslError, ValueError):
    """A binary file does not follow the expected layout."""


class CheckpointError(FormatError):
    """A checkpoint is unreadable or has an unsupported version."""
