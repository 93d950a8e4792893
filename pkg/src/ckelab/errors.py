"""Exception hierarchy shared by all modules."""


class CKEError(Exception):
    """Base class for errors raised by ckelab."""


class SumMismatch(CKEError):
    pass


class DegenerateFactor(CKEError):
    pass


class NotAvailable(CKEError):
    pass


class UnsupportedGeometry(CKEError):
    pass


class NotPositive(CKEError):
    pass


class NotKaehler(NotPositive):
    """A shifted metric left the Kähler cone.

    ``factor`` and ``node`` identify the first offending component and grid node.
    """

    def __init__(self, message, factor=None, node=None):
        super().__init__(message)
        self.factor = factor
        self.node = node


class ShapeMismatch(CKEError):
    pass


class NotSolvable(CKEError):
    pass


class SolverDiverged(CKEError):
    pass


class Diverged(SolverDiverged):
    pass


class Unbounded(CKEError):
    pass


class NotExact(CKEError):
    pass


class KernelExcess(CKEError):
    pass


class NotTraceFree(CKEError):
    pass


class NotTrivialStart(CKEError):
    pass


class NoConvergence(CKEError):
    pass


class InsufficientData(CKEError):
    pass


class ConfigError(CKEError):
    pass
