"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class ProtoSleepError(Exception):
    exit_code = 1


class ConfigError(ProtoSleepError, ValueError):
    exit_code = 3


class ValidationError(ProtoSleepError, ValueError):
    exit_code = 3


class FormatError(ProtoSleepError, ValueError):
    exit_code = 4


class LoadError(FormatError, FileNotFoundError):
    exit_code = 4


class ShapeError(ProtoSleepError, ValueError):
    exit_code = 4


class NumericError(ProtoSleepError, ArithmeticError):
    exit_code = 5


class TrainingDiverged(NumericError):
    """Raised when a loss goes non-finite. ``checkpoint`` holds the last finite state."""

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch
