"""Exception types raised across densekit."""


class DenseKitError(Exception):
    """Base class for all densekit errors."""


class ConfigError(DenseKitError, ValueError):
    """Invalid shapes, architecture settings or hyper-parameters."""


class UsageError(DenseKitError, RuntimeError):
    """An API was called in a state where it is not allowed."""


class DataError(DenseKitError, ValueError):
    """A record holds an invalid value (e.g. an out-of-range label)."""


class FormatError(DenseKitError, ValueError):
    """A file does not follow the expected binary layout."""


class TruncatedFileError(FormatError):
    """A file ended before all declared bytes were read."""


class PlanMismatchError(DenseKitError, ValueError):
    """A checkpoint was produced for a different architecture."""


class UnsupportedAnalysisError(DenseKitError, ValueError):
    """The requested analysis is not defined for this model."""


class TrainingDivergedError(DenseKitError, RuntimeError):
    """The loss became NaN or infinite during training."""
