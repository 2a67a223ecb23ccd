"""Exception hierarchy shared across the package."""


class TierPruneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TierPruneError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(TierPruneError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(TierPruneError):
    """Input data violates a precondition (empty dataset, bad labels, ...)."""


class FormatError(TierPruneError):
    """A file does not conform to its binary or textual format."""


class UsageError(TierPruneError):
    """An operation was called in a state it does not support."""


class NumericError(TierPruneError):
    """A published value came out NaN or infinite."""


class StageError(TierPruneError):
    """Pipeline failure tagged with the stage it occurred in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
