"""Exception types shared across the package."""


class TideError(Exception):
    """Base class for every error raised by tide_lab."""


class DimensionError(TideError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(TideError, ArithmeticError):
    """A non-finite value reached an operation that forbids it."""


class ParameterError(TideError, ValueError):
    """An argument lies outside the documented domain."""


class ConfigError(ParameterError):
    """Invalid model, training, or experiment configuration."""


class IngestionError(TideError, ValueError):
    """A token stream holds an id outside the vocabulary."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class StreamParseError(TideError, ValueError):
    """A token stream or checkpoint file is malformed."""


class TemplateError(TideError, ValueError):
    """A probe template is missing its slot."""


class TrainingDivergence(TideError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class OptimizerStateError(TideError, ValueError):
    """Optimizer state does not match the parameters it updates."""
