"""Exception hierarchy shared by every module."""


class SetBayesError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(SetBayesError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class EmptySet(SetBayesError, ValueError):
    pass


class NotPositiveDefinite(SetBayesError, ArithmeticError):
    pass


class NonFiniteState(SetBayesError, ArithmeticError):
    pass


class OptimizationDiverged(SetBayesError, ArithmeticError):
    pass


class EnsembleTooSmall(SetBayesError, ValueError):
    pass


class DegenerateSpan(SetBayesError, ArithmeticError):
    pass


class InvalidSplit(SetBayesError, ValueError):
    pass


class EmptyInput(SetBayesError, ValueError):
    pass


class DomainError(SetBayesError, ValueError):
    pass


class ZeroTruthNorm(SetBayesError, ArithmeticError):
    pass


class FormatVersionMismatch(SetBayesError, ValueError):
    pass


class ConfigError(SetBayesError, ValueError):
    pass


class IoError(SetBayesError, OSError):
    pass
