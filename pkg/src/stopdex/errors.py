"""Exception hierarchy shared by all stopdex modules."""


class StopdexError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidBoundary(StopdexError):
    pass


class DegenerateCoefficient(StopdexError):
    pass


class NonConvergent(StopdexError):
    pass


class OutOfGrid(StopdexError):
    pass


class DivergentIntegral(StopdexError):
    pass


class AllNonPositive(StopdexError):
    """The early reward is non-positive on the whole search region."""


class TriangleViolation(StopdexError):
    """max of the upper set exceeds min of the lower set; numerics are broken."""


class EmptyThresholdSet(StopdexError):
    pass


class NonIntervalRegion(StopdexError):
    pass


class EmptyMask(StopdexError):
    pass


class EmptySubdifferential(StopdexError):
    pass


class NonMonotoneIndex(StopdexError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ZeroDerivative(StopdexError):
    pass


class SingularSystem(StopdexError):
    pass


class NegativeVariance(StopdexError):
    def __init__(self, message, region=None):
        super().__init__(message)
        self.region = region


class InvalidRule(StopdexError):
    pass


class AtomUnsupported(StopdexError):
    pass
