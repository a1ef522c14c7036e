"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with what an operation requires."""


class ParameterError(ValueError):
    """A configuration value or argument is outside its legal range."""


class TapeConsumedError(RuntimeError):
    """A computation graph was asked to backpropagate twice."""


class CheckpointError(RuntimeError):
    """A parameter archive is missing, corrupt, or of the wrong kind."""


class TrainingAbort(RuntimeError):
    """Training stopped because a loss or gradient became non-finite."""
