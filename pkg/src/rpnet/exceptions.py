"""Exception types raised across the package."""


class IngestionError(OSError):
    """A dataset file or directory could not be read."""


class IntegrityError(ValueError):
    """Loaded data violates an expected structural property."""


class SamplingError(ValueError):
    """A sampler was asked for more classes or images than exist."""


class ConfigError(ValueError):
    """An architecture or experiment configuration is invalid."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite value.

    ``snapshot`` carries the diagnostic state at the failing step.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class EvaluationError(RuntimeError):
    """A scorer produced an unusable value during evaluation."""
