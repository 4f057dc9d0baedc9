"""Exception types shared across the package."""


class MhitError(Exception):
    """Base class for all package errors."""


class DimensionError(MhitError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(MhitError, ValueError):
    """Spatial sizes do not fit the requested operation."""


class ConfigurationError(MhitError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericError(MhitError, ArithmeticError):
    """NaN or otherwise non-finite values where finite ones are required."""


class ContractError(MhitError, RuntimeError):
    """A call violated an operation's precondition."""


class UndefinedMetricError(MhitError, ValueError):
    """A metric is undefined for the given inputs (e.g. no positives)."""


class CorruptionError(MhitError, ValueError):
    """Checksum mismatch while reading a binary file."""


class FormatError(MhitError, ValueError):
    """Malformed file contents; ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(MhitError, ArithmeticError):
    """Loss became non-finite during training."""


class UnsupportedVersionError(FormatError):
    """A binary file declares a format version this build cannot read."""
