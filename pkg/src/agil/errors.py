"""Exception types shared across the package."""


class AgilError(Exception):
    """Base class for all package errors."""


class SchemaError(AgilError):
    """A trial directory or report file does not follow the expected layout."""


class IntegrityError(AgilError):
    """Data is well-formed but internally inconsistent (duplicates, dangling refs)."""


class InsufficientDataError(AgilError):
    """Not enough trajectories or frames for the requested operation."""


class ConfigurationError(AgilError):
    """Invalid model, channel or experiment configuration."""


class EmptyGazeError(AgilError):
    """No usable on-screen gaze sample was available to build a saliency map."""


class DataError(AgilError):
    """A record carries a label that the model cannot represent."""


class TrainingDivergedError(AgilError):
    """Training produced a non-finite loss."""
