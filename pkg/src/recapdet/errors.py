"""Exception types raised across the package."""


class RecapError(Exception):
    """Base class for all package errors."""


class ShapeError(RecapError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RecapError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(RecapError, ValueError):
    """Invalid configuration or missing configuration entry."""


class InputError(RecapError, ValueError):
    """Invalid user-supplied data (labels, images, score lists)."""


class UndefinedMetricError(RecapError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class UsageError(RecapError, RuntimeError):
    """API misuse, such as calling backward on a non-scalar."""


class TrainingDivergenceError(RecapError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class CorpusIOError(RecapError, OSError):
    """Reading or writing corpus files failed (including codec failures)."""
