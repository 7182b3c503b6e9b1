"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class SddeBemError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(SddeBemError):
    """An argument violates a documented precondition."""


class GridError(SddeBemError):
    """Horizon, delay and step size are not commensurate, or a driving
    noise array does not match the grid."""


class SolverError(SddeBemError):
    """The implicit step could not be solved to tolerance.

    Carries the best iterate found so far plus enough context (step index,
    path index, partial trajectory) to diagnose the failure.
    """

    def __init__(self, message, *, step=None, path_index=None, best=None,
                 residual=None, partial=None):
        super().__init__(message)
        self.step = step
        self.path_index = path_index
        self.best = best
        self.residual = residual
        self.partial = partial


class NumericalError(SolverError):
    """An evaluator returned NaN/inf for finite input."""


class StepSizeGuardWarning(UserWarning):
    """Step size exceeds (or cannot be checked against) a solvability or
    stability bound implied by the model's declared constants."""
