"""Exception hierarchy shared by every module."""


class ConvintError(Exception):
    """Base class for all package errors."""


class SamplingError(ConvintError):
    """An evaluator produced a non-finite value at a grid node."""


class ResolutionError(ConvintError):
    """The grid is too coarse for the requested field or operation."""


class DomainError(ConvintError):
    """An argument lies outside the admissible range (e.g. p < 1)."""


class AliasingError(ConvintError):
    """A field carries too much spectral energy near the Nyquist band."""


class MeanError(ConvintError):
    """A field that must have zero mean does not."""


class ParamError(ConvintError):
    """Mikado parameters violate their invariants."""


class InfeasibleError(ConvintError):
    """No exponent plan satisfies the required inequality system."""


class SolenoidalityError(ConvintError):
    """A velocity field that must be divergence-free is not."""


class BudgetExceeded(ConvintError):
    """The resolution budget blocks the requested construction.

    ``required_n`` is the smallest grid size that would have been needed and
    ``blocking`` names the inequality that failed.
    """

    def __init__(self, message, required_n=None, blocking=None, partial=None):
        super().__init__(message)
        self.required_n = required_n
        self.blocking = blocking
        self.partial = partial
