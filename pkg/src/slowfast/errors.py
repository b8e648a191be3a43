"""Exception types shared across the package."""


class SlowfastError(Exception):
    """Base class for all package errors."""


class ProjectionError(SlowfastError):
    """Newton projection onto {F=z} failed to converge (step too large near |grad F|~0)."""


class StepResolutionError(SlowfastError):
    """Time step too coarse to resolve the fast rotation."""


class CurveEscapeError(SlowfastError):
    """Level-curve corrector diverged (level too close to a critical value for the step)."""


class DegenerateCriticalPointError(SlowfastError):
    """Tangential Hessian has an eigenvalue below tolerance; classification unreliable."""


class NonGenericLevelsError(SlowfastError):
    """Two critical points share a level value; perturb the energy function."""


class SeparatrixAmbiguityError(SlowfastError):
    """Point too close to a separatrix level to classify onto a graph edge."""


class EdgeRangeError(SlowfastError):
    """Requested coordinate lies outside the edge's level range."""


class ExtrapolationError(SlowfastError):
    """Limit extrapolation along a level sequence did not stabilize."""


class SignViolationError(SlowfastError):
    """An integral required to be positive came out non-positive (perturbation not friction-like)."""


class StallError(SlowfastError):
    """Averaged drift vanished in the interior of an edge; the slow flow stalls."""


class DivergentIntegralError(SlowfastError):
    """Threshold integrand not integrable at an endpoint."""


class RejectionOverflowError(SlowfastError):
    """Rejection sampler acceptance rate fell below the safety floor."""


class VanishingRateError(SlowfastError):
    """A loop rate required to be nonzero is below tolerance."""


class TrappedInWellError(SlowfastError):
    """Trajectory meant to explore the ergodic region entered a well."""
