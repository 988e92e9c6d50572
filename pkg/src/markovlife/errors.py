"""Exception hierarchy shared by all modules."""


class MarkovLifeError(Exception):
    """Base class for library errors."""


class DomainError(MarkovLifeError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class StructuralError(MarkovLifeError, ValueError):
    """Matrix dimensions or block layouts are incompatible."""


class NumericError(MarkovLifeError, ArithmeticError):
    """A numerical procedure broke down (singular matrix, underflow, ...)."""


class HazardUnavailable(NumericError):
    """Survival probability underflowed, so the hazard rate is undefined."""


class FitDegeneracyError(NumericError):
    """The EM iteration hit a zero-likelihood observation or an empty state."""


class FitFailureError(NumericError):
    """Every EM restart failed."""


class NonMonotoneCurveError(DomainError):
    """Scaled bond prices increase with maturity."""

    def __init__(self, message, maturities=()):
        super().__init__(message)
        self.maturities = list(maturities)


class ConvergenceError(NumericError):
    """An iterative solver did not converge; ``trace`` holds the iterates."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class NoPremiumSensitivity(NumericError):
    """The reserve does not depend on the premium parameter."""
