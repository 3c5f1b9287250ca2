"""Exception hierarchy shared by all modules."""


class EqDenseError(Exception):
    """Base class for library errors."""


class DimensionError(EqDenseError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class UnsupportedSizeError(DimensionError):
    """Kernel size has no exact group action (even or non-square)."""


class BuildError(DimensionError):
    """Model architecture cannot be built for the requested input size."""


class ContractError(EqDenseError, ValueError):
    """A precondition of an API call was violated."""


class ValidationError(EqDenseError, ValueError):
    """Input values are outside their admissible domain."""


class ConfigurationError(EqDenseError, ValueError):
    """Run or dataset configuration is unusable."""


class UninitializedStateError(EqDenseError, RuntimeError):
    """Stateful layer used before its state was populated."""


class UndefinedMetricError(EqDenseError, ValueError):
    """Metric is mathematically undefined for the given inputs."""


class FormatError(EqDenseError, ValueError):
    """A file does not conform to its container format."""
