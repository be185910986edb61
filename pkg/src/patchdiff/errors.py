"""Exception hierarchy shared by all patchdiff modules."""


class PatchDiffError(Exception):
    """Base class for every error raised by the package."""


class DomainError(PatchDiffError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(PatchDiffError, ValueError):
    """Parameters are individually valid but jointly unusable."""


class PreconditionError(PatchDiffError, ValueError):
    """A documented precondition (grid divisibility, sizes, ...) is violated."""


class DataError(PatchDiffError, ValueError):
    """Input data is inconsistent or insufficient for the requested computation."""


class SolverError(PatchDiffError, RuntimeError):
    """An iterative method failed to converge.

    Attributes
    ----------
    trace : list of float
        Residual (or iterate) history up to the failure.
    context : dict
        Run parameters attached by callers higher up the stack.
    """

    def __init__(self, message, trace=None, context=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
        self.context = dict(context) if context is not None else {}

    def __str__(self):
        msg = super().__str__()
        if self.context:
            ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
            msg = f"{msg} [{ctx}]"
        return msg


class FitError(PatchDiffError, RuntimeError):
    """Nonlinear least squares failed from every starting point."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class UsageError(PatchDiffError, ValueError):
    """Bad configuration key, value type or missing required key."""
