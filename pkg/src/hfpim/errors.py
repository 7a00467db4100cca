"""Exception types raised across the package."""


class HfpimError(Exception):
    """Base class for all package errors."""


class InvalidInput(HfpimError, ValueError):
    pass


class InvalidRank(HfpimError, ValueError):
    pass


class TrainingDiverged(HfpimError, RuntimeError):
    pass


class CalibrationFailed(HfpimError, RuntimeError):
    pass


class PlacementFailed(HfpimError, RuntimeError):
    """A layer does not fit the hardware under the requested parallelism.

    ``constraint`` names the violated capacity limit.
    """

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class ConfigError(HfpimError, ValueError):
    pass
