class MixLoraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MixLoraError, ValueError):
    pass


class NumericError(MixLoraError, ArithmeticError):
    pass


class ConfigError(MixLoraError, ValueError):
    pass


class StateError(MixLoraError, RuntimeError):
    pass


class ConstructionError(MixLoraError, ValueError):
    """Requested synthetic task geometry cannot be realised."""


class DegenerateGradientError(NumericError):
    """A gradient norm fell below the normalisation floor."""


class TrainingError(MixLoraError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
