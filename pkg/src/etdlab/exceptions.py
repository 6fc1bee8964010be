"""Exception types raised across etdlab."""


class EtdLabError(Exception):
    """Base class for all etdlab errors."""


class ModelError(EtdLabError, ValueError):
    """An MDP model or policy pair is structurally invalid."""


class NonIrreducible(EtdLabError):
    """The chain has no strictly positive stationary distribution."""


class UnreachableAction(EtdLabError):
    """The target policy takes an action the behavior policy never takes."""


class SingularSystem(EtdLabError, ArithmeticError):
    """A linear system required by the analysis is singular."""


class Inconsistent(EtdLabError, ArithmeticError):
    """``C theta + b = 0`` has no solution (b outside range(C))."""


class EmptyEmphasis(EtdLabError):
    """No state receives positive emphasis."""


class NonFinite(EtdLabError, FloatingPointError):
    """An iterate became NaN or infinite."""


class WindowOutOfRange(EtdLabError, IndexError):
    """A requested window does not fit inside the iterate log."""


class ConfigParse(EtdLabError, ValueError):
    """An experiment configuration could not be parsed."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class MissingRuns(EtdLabError):
    """``report`` found no usable per-run outputs."""
