"""Exception hierarchy shared across the package."""


class OpfLabError(Exception):
    """Base class for all package errors."""


class CaseError(OpfLabError, ValueError):
    """Problem with a case file or the network built from it."""


class MalformedMatrix(CaseError):
    pass


class MissingSection(CaseError):
    pass


class NonNumericEntry(CaseError):
    pass


class NoSlackBus(CaseError):
    pass


class DuplicateBusId(CaseError):
    pass


class ZeroImpedanceBranch(CaseError):
    pass


class InvalidNetwork(CaseError):
    """A network invariant (bounds ordering, unknown bus reference, ...) is violated."""


class UnsupportedFeature(CaseError):
    pass


class AngleGuardError(OpfLabError):
    """A branch angle difference exceeds pi/2, outside the small-angle model."""


class SolverError(OpfLabError):
    pass


class SingularKKT(SolverError):
    pass


class NegativeLoadFactor(OpfLabError, ValueError):
    pass


class TooManyFailures(OpfLabError):
    pass


class ShapeMismatch(OpfLabError, ValueError):
    pass


class NonFiniteLoss(OpfLabError, FloatingPointError):
    pass


class DegenerateInput(OpfLabError, ValueError):
    pass
