"""Exception hierarchy shared by every amfc module."""


class AmfcError(Exception):
    """Base class for all errors raised by amfc."""


class DimensionError(AmfcError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigurationError(AmfcError, ValueError):
    """A parameter combination cannot be satisfied."""


class NumericError(AmfcError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class IngestionError(AmfcError):
    """A corpus file or label row could not be loaded."""


class FormatError(AmfcError):
    """A serialized artifact is malformed or does not match its header."""


class TrainingError(AmfcError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class BenchError(AmfcError):
    """Timing could not be performed."""


class AnalysisError(AmfcError):
    """Spectrum analysis has nothing to work with."""
