"""Exception and warning types raised by exitflow."""


class ExitFlowError(Exception):
    """Base class for all numeric and input failures in exitflow."""


class InvalidInputError(ExitFlowError, ValueError):
    pass


class DegenerateCovectorError(ExitFlowError):
    """A covector is (numerically) zero where the operation needs p != 0."""


class NonsmoothPointError(ExitFlowError):
    """A derivative was requested on a kink of a nonsmooth function."""


class CapabilityError(ExitFlowError):
    """The problem does not supply a derivative the operation needs."""


class BracketFailureError(ExitFlowError):
    pass


class DegenerateSeedError(ExitFlowError):
    """The boundary seed Jacobian det A(z) vanishes."""


class OutOfChartError(ExitFlowError):
    pass


class NonsmoothCharacteristicError(ExitFlowError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class NoExitError(ExitFlowError):
    pass


class IterationLimitError(ExitFlowError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InsufficientResolutionError(ExitFlowError):
    pass


class IncompatibleGridsError(ExitFlowError):
    pass


class NoDataError(ExitFlowError):
    pass


class CompatibilityWarning(UserWarning):
    """H(z, grad psi(z)) >= 0 at a boundary point: the terminal cost is too steep."""


class EmptyFieldWarning(UserWarning):
    pass
