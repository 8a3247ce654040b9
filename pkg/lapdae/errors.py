"""
Exception hierarchy for the LapDAE toolkit
Each class carries the process exit code the command line returns for it
"""


class LapDAEError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 1


class UsageError(LapDAEError):
    """Unknown metric/layer tag, level out of range, bad CLI range"""

    exit_code = 2


class ConfigError(LapDAEError):
    """Invalid configuration key, value or architecture chain"""

    exit_code = 3


class DataError(LapDAEError):
    """Dataset file could not be ingested"""

    exit_code = 4
    code = "data"


class MissingDataError(DataError):
    code = "missing"


class MagicNumberError(DataError):
    code = "bad-magic"


class TruncatedFileError(DataError):
    code = "truncated"

    def __init__(self, message: str, offset: int = None):
        super().__init__(message)
        self.offset = offset


class CountMismatchError(DataError):
    code = "count-mismatch"


class StorageError(LapDAEError):
    """Artifact could not be written or read"""

    exit_code = 5


class CheckpointError(StorageError):
    """Checkpoint file has a bad magic, unknown version or malformed payload"""


class NumericError(LapDAEError):
    """Non-finite values reached the optimizer"""

    exit_code = 6


class NonFiniteLossError(NumericError):
    """Training loss became NaN/Inf; carries the last parameters that were finite"""

    def __init__(self, message: str, last_good=None, iteration: int = None, epoch: int = 0, state=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration
        self.epoch = epoch
        self.state = state


class DimensionError(LapDAEError, ValueError):
    """Tensor shapes do not line up"""


class FlavorError(LapDAEError, ValueError):
    """Pyramid of the wrong flavor for the requested operation"""


class GradientError(LapDAEError, RuntimeError):
    """Gradient tape misuse, e.g. replaying a consumed tape"""
