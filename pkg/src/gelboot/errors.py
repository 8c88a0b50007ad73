"""Exception hierarchy shared by the estimators and the CLI."""


class GelbootError(Exception):
    """Base class for all package errors."""


class InputError(GelbootError, ValueError):
    """Malformed data file, model descriptor or configuration."""


class DomainError(GelbootError, ArithmeticError):
    """A quantity left its admissible domain.

    Raised for non-finite moment evaluations (``row`` holds the offending
    observation) and for EL multipliers with ``1 - lambda'g_i <= 0``.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class InnerLoopError(GelbootError, RuntimeError):
    """The Lagrange-multiplier maximization did not converge."""

    def __init__(self, message, grad_norm=float("nan")):
        super().__init__(message)
        self.grad_norm = grad_norm


class EstimationError(GelbootError, RuntimeError):
    """The outer minimization produced no usable candidate."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class VarianceError(GelbootError, ArithmeticError):
    """Singular or ill-conditioned Jacobian in the sandwich formula."""


class BootstrapError(GelbootError, RuntimeError):
    """Too many failed bootstrap replicates, or an empty distribution."""

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)
