"""Exception hierarchy shared by every module of the package."""


class PRSLError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDimensionError(PRSLError, ValueError):
    pass


class NumericError(PRSLError, ArithmeticError):
    pass


class InvalidLabelError(PRSLError, ValueError):
    pass


class InvalidWindowError(PRSLError, ValueError):
    pass


class InvalidSequenceError(PRSLError, ValueError):
    pass


class InvalidInputError(PRSLError, ValueError):
    pass


class InvalidConfigError(PRSLError, ValueError):
    pass


class TrainingError(PRSLError):
    """Raised when a loss becomes non-finite during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class AttackError(PRSLError):
    pass


class CheckpointError(PRSLError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
