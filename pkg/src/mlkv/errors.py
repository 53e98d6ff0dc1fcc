"""Exception types shared across the package.

Each class carries the process exit status the command line maps it to.
"""


class MLKVError(Exception):
    exit_code = 1


class ValidationError(MLKVError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class InfeasibleError(ValidationError):
    pass


class CapacityError(MLKVError):
    """Raised when a cache append would run past its preallocated capacity."""

    exit_code = 3


class NumericError(MLKVError, FloatingPointError):
    exit_code = 4


class CheckpointError(MLKVError, OSError):
    exit_code = 5
