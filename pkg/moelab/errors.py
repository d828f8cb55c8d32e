"""Exceptions raised by moelab.

Every error derives from :class:`MoelabError` and from the builtin exception a
caller would naturally catch, so ``except ValueError`` keeps working.
"""


class MoelabError(Exception):
    """Base class of all moelab errors."""


class DimensionError(MoelabError, ValueError):
    """Shapes do not fit together."""


class ParameterError(MoelabError, ValueError):
    """A numeric argument is outside its admissible range."""


class ConfigurationError(MoelabError, ValueError):
    """A configuration violates a structural invariant."""


class EvaluationError(MoelabError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class RoutingError(MoelabError, IndexError):
    """An expert index is out of range."""


class StateError(MoelabError, RuntimeError):
    """Stateful object (e.g. a KV cache) is inconsistent with its use."""


class EmptyBatchError(MoelabError, ValueError):
    """An operation received no tokens."""


class UndefinedRatioError(MoelabError, ZeroDivisionError):
    """A ratio has a zero denominator."""


class NonFiniteLossError(MoelabError, FloatingPointError):
    """Training produced a NaN or Inf loss."""
