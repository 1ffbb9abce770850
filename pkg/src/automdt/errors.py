"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value (utility base, scenario field, override)."""


class InsufficientExplorationError(ValueError):
    """An exploration log never exercised some stage with at least one thread."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss; ``snapshot`` holds the offending state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class TransferStallError(RuntimeError):
    """The environment made no progress for too many consecutive windows."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class PipelineError(RuntimeError):
    """The live pipeline environment could not start or drive its workers."""
