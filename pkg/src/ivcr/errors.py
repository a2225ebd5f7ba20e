"""Exception types shared across the package."""


class IvcrError(Exception):
    """Base class for all package errors."""


class ValidationError(IvcrError):
    """Input data or configuration failed validation."""


class NoEventsError(ValidationError):
    """A cohort contained no uncensored events inside the horizon."""


class EmptySubgroupError(IvcrError):
    """The requested exposure/instrument subgroup has no subjects or no events."""


class RankDeficiencyError(IvcrError):
    """A regression design was rank deficient."""


class ConvergenceError(IvcrError):
    """An iterative fit failed to converge."""


class SingularDenominatorError(IvcrError):
    """The estimating-equation denominator vanished at an event time.

    Carries the offending time so callers can report where the fit
    became unidentified. The fit is aborted, not truncated.
    """

    def __init__(self, time: float, value: float, scale: float):
        self.time = time
        self.value = value
        self.scale = scale
        super().__init__(
            f"estimating-equation denominator ~ {value:.3e} at t={time!r} "
            f"(below tolerance 1e-10 * {scale:.3e}); fit aborted"
        )


class SingularNormalEquationsError(IvcrError):
    """The extended-model normal equations were singular at an event time."""

    def __init__(self, time: float, cond: float):
        self.time = time
        self.cond = cond
        super().__init__(
            f"normal equations singular at t={time!r} (condition number ~ {cond:.3e}); "
            "check for collinear exposure/interaction columns"
        )
