"""Exception hierarchy shared by every stage of the solver."""


class JangMotsError(Exception):
    """Base class; ``stage`` is filled in by the pipeline driver."""

    stage = "unknown"


class NonPositiveDefinite(JangMotsError):
    pass


class BoundaryStencil(JangMotsError):
    pass


class NotASolution(JangMotsError):
    pass


class DegenerateElement(JangMotsError):
    pass


class UnresolvedDomain(JangMotsError):
    pass


class PunctureInDomain(JangMotsError):
    pass


class HypothesisViolated(JangMotsError):
    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = [] if offending is None else list(offending)


class NoConvergence(JangMotsError):
    def __init__(self, message, best=None, report=None):
        super().__init__(message)
        self.best = best
        self.report = report


class LinearSolveFailure(JangMotsError):
    pass


class RadiusTooLarge(JangMotsError):
    pass


class BarrierVerificationFailed(JangMotsError):
    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = [] if offending is None else list(offending)


class PreconditionError(JangMotsError):
    pass


class StalledBelowTolerance(JangMotsError):
    pass


class EmptyInterface(JangMotsError):
    pass


class BudgetTooLarge(JangMotsError):
    pass


class ParseError(JangMotsError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class ValidationError(JangMotsError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MagicMismatch(JangMotsError):
    pass


class DimensionMismatch(JangMotsError):
    pass


class TruncatedFile(JangMotsError):
    pass


class IoError(JangMotsError):
    pass
