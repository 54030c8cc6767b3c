"""Exception hierarchy shared across the package."""


class BrwreError(Exception):
    """Base class for all package-specific errors."""


class DegreeRangeError(BrwreError, ValueError):
    """Hermite degree outside the supported range."""


class InvalidModelError(BrwreError, ValueError):
    """Environment model violates a structural constraint."""


class DegenerateLawError(BrwreError, ValueError):
    """A law has zero variance or an otherwise degenerate parameterization."""


class DegenerateWindowError(BrwreError, ValueError):
    """Cumulant window has zero length or zero variance."""


class InsufficientCoefficientsError(BrwreError, ValueError):
    """Correction polynomial requested beyond the available cumulant orders."""


class EmptyEnvironmentError(BrwreError, ValueError):
    """Requested a realized environment of length zero."""


class EnvironmentTooShortError(BrwreError, ValueError):
    """Realized environment shorter than the requested horizon."""


class GenerationUnavailableError(BrwreError, LookupError):
    """Requested generation was not simulated (extinction or particle cap).

    Carries the trajectory termination record in ``termination``.
    """

    def __init__(self, message, termination=None):
        super().__init__(message)
        self.termination = termination


class InsufficientDataError(BrwreError, ValueError):
    """Series or ensemble too short for the requested estimate."""


class OracleBudgetError(BrwreError, ValueError):
    """Oracle evaluation would exceed its resource limits."""


class ConfigError(BrwreError, ValueError):
    """Experiment configuration file is malformed or inconsistent."""
