"""
Exception types raised by the pipeline services.

The command layer in app.py maps these onto process exit codes.
"""


class ChipPipelineError(Exception):
    """Base class for every error raised by the services."""


class ShapeError(ChipPipelineError, ValueError):
    pass


class GradientError(ChipPipelineError, ValueError):
    pass


class ConfigError(ChipPipelineError, ValueError):
    pass


class DataError(ChipPipelineError, ValueError):
    pass


class LeakageError(ChipPipelineError, ValueError):
    pass


class MetricError(ChipPipelineError, ValueError):
    pass


class NumericError(ChipPipelineError, ArithmeticError):
    pass


class StorageError(ChipPipelineError, OSError):
    pass
