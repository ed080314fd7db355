"""Exception types raised across the package."""


class AgpError(Exception):
    """Base class for all package errors."""


class NotStronglyConnected(AgpError, ValueError):
    def __init__(self, source: int, target: int):
        self.source = source
        self.target = target
        super().__init__(
            f"graph is not strongly connected: no path from {source + 1} to {target + 1}"
        )


class IndexOutOfRange(AgpError, IndexError):
    pass


class DelayOutOfBounds(AgpError, ValueError):
    pass


class MissingDelayAssignment(AgpError, ValueError):
    pass


class NonzeroSelfDelay(AgpError, ValueError):
    pass


class NotColumnStochastic(AgpError, ValueError):
    pass


class InfeasiblePolicy(AgpError, ValueError):
    pass


class DimensionMismatch(AgpError, ValueError):
    pass


class DebiasUndefinedForRealNode(AgpError, ArithmeticError):
    pass


class UndefinedEstimate(AgpError, LookupError):
    """Raised when a de-biased estimate is read from a row whose weight is zero."""


class InsufficientData(AgpError, ValueError):
    pass


class NonFiniteInput(AgpError, ValueError):
    pass


class SingularSystem(AgpError, ArithmeticError):
    pass


class InvalidTarget(AgpError, ValueError):
    pass


class StepSizeExceedsBound(AgpError, ValueError):
    pass


class EmptyRun(AgpError, ValueError):
    pass


class BoundViolated(AgpError, AssertionError):
    pass


class Deadlock(AgpError, RuntimeError):
    pass


class QueueOverflow(AgpError, RuntimeError):
    pass


class IncompleteLog(AgpError, ValueError):
    pass


class ConfigError(AgpError, ValueError):
    pass


class MissingArtifacts(AgpError, FileNotFoundError):
    pass
