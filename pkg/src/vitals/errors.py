"""Exception hierarchy shared across the package."""


class VitalsError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VitalsError):
    """Tensor shapes are inconsistent with an operation's contract."""


class EmptySequenceError(ShapeError):
    """An operation received a zero-length frame sequence."""


class ParameterError(VitalsError):
    """An argument is outside its legal range (dilation, dropout rate, ...)."""


class DataError(VitalsError):
    """Input data violates its contract (bad label, length mismatch, ...)."""


class CoverageError(DataError):
    """Annotation segments do not tile the frame range exactly."""


class FormatError(VitalsError):
    """A file does not match its declared binary/text format."""


class CorruptionError(FormatError):
    """A file matched its format header but the payload is damaged.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(VitalsError):
    """Configuration file or checkpoint/config mismatch."""


class MetricError(VitalsError):
    """A metric is undefined for the given inputs (e.g. empty matrix)."""


class TrainingError(VitalsError):
    """Training aborted: non-finite loss or gradients."""
