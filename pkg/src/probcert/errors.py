"""Exception hierarchy shared by every probcert module."""


class ProbCertError(Exception):
    """Base class for all library errors."""


class ConfigurationError(ProbCertError, ValueError):
    """A system, barrier or scenario definition is inconsistent."""


class NumericalDivergence(ProbCertError, FloatingPointError):
    """A simulation step produced a non-finite state."""

    def __init__(self, message, component=None, step=None):
        super().__init__(message)
        self.component = component
        self.step = step


class HorizonExhausted(ProbCertError):
    """Elapsed time exceeds the horizon of a shrinking-window specification."""


class WeightOverflow(ProbCertError, OverflowError):
    """A Girsanov log-weight exceeded the configured cap."""

    def __init__(self, message, log_w=None):
        super().__init__(message)
        self.log_w = log_w


class OutOfHull(ProbCertError):
    """A field query fell outside the tabulated grid."""

    def __init__(self, message, nearest=None):
        super().__init__(message)
        self.nearest = nearest


class LpInfeasible(ProbCertError):
    """The linear program has no feasible point."""


class LpUnbounded(ProbCertError):
    """The linear program objective is unbounded below."""


class SolverStall(ProbCertError):
    """The simplex iteration limit was hit."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class Infeasible(ProbCertError):
    """No control satisfies the safety constraint."""

    def __init__(self, message, exposed_risk=None):
        super().__init__(message)
        self.exposed_risk = exposed_risk


class DegenerateGradient(ProbCertError):
    """The control coefficient of the safety constraint vanishes."""


class EmptyCandidateSet(ProbCertError):
    """No candidate control on the search grid satisfies the constraint."""


class CvarInfeasible(ProbCertError):
    """No control in the search interval meets the CVaR barrier bound."""
