"""Exception types shared across the package."""


class SemrelError(Exception):
    """Base class for all package errors."""


class DimensionError(SemrelError):
    """Operand shapes are incompatible."""


class ParameterError(SemrelError):
    """A numeric parameter is outside its legal range."""


class ContractError(SemrelError):
    """A caller violated an operation's precondition."""


class ConfigError(SemrelError):
    """A configuration object is internally inconsistent."""


class InputError(SemrelError):
    """User-supplied data (text, files, batches) is malformed."""


class BoundsError(SemrelError):
    """An index or id is outside its table."""


class UndefinedMetricError(SemrelError):
    """A metric has no defined value for the given inputs."""


class NonFiniteError(SemrelError):
    """A tensor picked up a NaN or Inf, which is an error state."""
