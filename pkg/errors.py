# errors.py
"""Exception types shared by every stage of the pipeline."""


class Au2AvError(Exception):
    """Base class for all errors raised by this project."""


class ValidationError(Au2AvError, ValueError):
    """An input violates a documented precondition."""


class ConfigError(ValidationError):
    """The configuration file or one of its values is invalid."""


class MediaReadError(Au2AvError, OSError):
    """A media file exists but could not be decoded."""


class ProviderError(Au2AvError):
    """An injected provider (pose, landmarks, features, ...) failed."""


class NonFiniteLossError(Au2AvError, ArithmeticError):
    """A training loss became NaN or infinite."""

    def __init__(self, loss_name, value):
        self.loss_name = loss_name
        self.value = value
        super().__init__(f"loss '{loss_name}' is not finite ({value})")


class TrainingDivergenceError(Au2AvError):
    """An optimization run moved away from its objective."""


class CheckpointError(Au2AvError):
    """A checkpoint could not be written, read or matched to the config."""
