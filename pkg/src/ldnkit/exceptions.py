"""Contains exceptions used by ldnkit"""


class LdnError(RuntimeError):
    """Base class of all errors raised by ldnkit"""


class ShapeError(LdnError, ValueError):
    """Tensor extents do not agree with what an operation requires"""


class DTypeError(LdnError, TypeError):
    """A tensor has an unsupported element type"""


class ConfigError(LdnError, ValueError):
    """A configuration document or specification is invalid"""


class PolicyError(LdnError, ValueError):
    """A checkpoint policy is unknown or does not fit the model it is applied to"""


class CheckpointError(LdnError):
    """A recomputation segment leaks an interior value to a node outside the segment"""


class TraceConsumedError(LdnError):
    """Attempted to run the backward pass on a trace that was already consumed"""


class StatisticsError(LdnError):
    """Batchnorm statistics are missing or cannot be computed"""


class NonFiniteGradientError(LdnError, ArithmeticError):
    """An optimizer step was rejected because a gradient contains NaN or infinity"""


class MetricError(LdnError, ValueError):
    """A metric was requested on data that does not define it"""


class FormatError(LdnError, ValueError):
    """A file does not follow the format it claims to have"""
