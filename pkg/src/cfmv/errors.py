"""Exception hierarchy. Every message names the module and the violated precondition."""


class CfmvError(Exception):
    """Base class for all library errors."""


class DataError(CfmvError):
    """Malformed input data: bad CSV cells, schema violations, invalid observation sets."""


class NuisanceError(CfmvError):
    """Nuisance fitting preconditions violated (fold sizes, positivity, learner params)."""


class SplitError(CfmvError):
    """Sample-splitting preconditions violated (n too small, overlapping folds)."""


class CalibrationError(CfmvError):
    """Covariance calibration preconditions violated (fold mismatch, non-finite input)."""


class CompileError(CfmvError):
    """A mean-variance program cannot be lowered to a standard QP (non-PD Q, no constraints)."""


class InfeasibleError(CfmvError):
    """The constraint set is empty. Carries a separating (Farkas-style) certificate."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class SolverError(CfmvError):
    """The QP solver failed (iteration cap, unmet KKT tolerances). Carries the last iterate."""

    def __init__(self, message, last_iterate=None, residuals=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residuals = residuals


class InferenceError(CfmvError):
    """Uncertainty quantification preconditions violated (SC/LICQ failure, B too small)."""
