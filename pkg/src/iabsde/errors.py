"""Exception hierarchy shared by every module."""


class IABSDEError(Exception):
    pass


# construction / grid
class NonPositiveHorizon(IABSDEError, ValueError):
    pass


class TailBeforeHorizon(IABSDEError, ValueError):
    pass


class ZeroSteps(IABSDEError, ValueError):
    pass


class DegenerateShape(IABSDEError, ValueError):
    pass


class NodeOutOfRange(IABSDEError, IndexError):
    pass


class DiscontinuousTerminal(IABSDEError, ValueError):
    pass


class GridMismatch(IABSDEError, ValueError):
    pass


class BundleMismatch(IABSDEError, ValueError):
    pass


class RangeMismatch(IABSDEError, ValueError):
    pass


# stochastic
class KernelEvaluationFailure(IABSDEError, ValueError):
    pass


class ControlOutOfSet(IABSDEError, ValueError):
    pass


# generators
class KernelBoundViolation(IABSDEError, ValueError):
    pass


class SegmentTooShort(IABSDEError, ValueError):
    pass


class UnboundedFamily(IABSDEError, ValueError):
    pass


# solver
class ProjectionFailure(IABSDEError, RuntimeError):
    pass


class RankDeficiency(ProjectionFailure):
    pass


class InsufficientPaths(ProjectionFailure):
    pass


class NonFiniteValue(IABSDEError, FloatingPointError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class MaxIterExceeded(IABSDEError, RuntimeError):
    """Raised when Picard iteration hits ``max_iter``; carries the partial solution."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution

    @property
    def residual_history(self):
        return [] if self.solution is None else self.solution.residual_history


# duality / control / analysis
class StochasticDataRejected(IABSDEError, ValueError):
    pass


class EmptyControlGrid(IABSDEError, ValueError):
    pass


class ControlProblemInvalid(IABSDEError, ValueError):
    pass


class MissingModulus(IABSDEError, ValueError):
    pass


class TooFewIterations(IABSDEError, ValueError):
    pass


class ZeroRhsWithNonzeroLhs(IABSDEError, ArithmeticError):
    pass


# cli
class ConfigParseError(IABSDEError, ValueError):
    pass


class ValidationError(IABSDEError, ValueError):
    pass
