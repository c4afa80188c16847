"""
Exception hierarchy

Every error raised by the package derives from ``UsrError`` and carries the
exit code the command line maps it to::

    0 success
    1 usage error
    2 data / file error
    3 numeric failure (non-finite values, failed gradient check)
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsrError(Exception):
    exit_code = EXIT_DATA


class UsageError(UsrError):
    exit_code = EXIT_USAGE


class DataError(UsrError, ValueError):
    """
    Input data is malformed, too small or inconsistent with the operation
    """
    exit_code = EXIT_DATA


class DimensionError(UsrError, ValueError):
    """
    Tensor shapes do not agree with what an operation requires
    """
    exit_code = EXIT_DATA


class ParameterError(UsrError, ValueError):
    """
    A scalar parameter lies outside its documented range
    """
    exit_code = EXIT_DATA


class CheckpointError(UsrError):
    exit_code = EXIT_DATA


class CorruptCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):

    def __init__(self, message: str, names: list[str] = None):
        super().__init__(message)
        self.names = names or []


class NumericError(UsrError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class TrainingAborted(NumericError):
    """
    Raised when a training step produces a non-finite value.

    ``checkpoint`` holds the parameters of the last step whose loss was finite,
    so the caller can still persist them.
    """

    def __init__(self, message: str, checkpoint=None, step: int = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class GradCheckFailure(NumericError):
    pass
