"""Exception types shared across the package."""


class GslabError(Exception):
    """Base class for every error raised by gslab."""


class DimensionError(GslabError, ValueError):
    """Tensor shapes do not line up."""


class DegenerateVarianceError(DimensionError):
    """Batch statistics requested from a single element."""


class StateError(GslabError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class FiniteValueError(GslabError, FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class ParseError(GslabError, ValueError):
    """An augmentation spec string could not be parsed."""


class PipelineError(GslabError, ValueError):
    """An augmentation pipeline is not composable for the given geometry."""


class ConfigError(GslabError, ValueError):
    """An experiment manifest is inconsistent."""


class RecordError(GslabError, ValueError):
    """An annotation record is invalid."""


class LoadError(GslabError, ValueError):
    """A checkpoint cannot be read or does not fit the model."""
