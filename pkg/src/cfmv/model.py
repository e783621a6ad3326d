"""Core domain types shared by all other modules. No algorithms live here.

All types are immutable after construction and safe to share across threads.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DataError
from ._utils import symmetrize

MAX_OUTCOMES = 64  # dense small-k solver target; larger k is rejected up front

ESTIMATOR_KINDS = ("plugin", "ipw", "doubly_robust")
CALIBRATION_KINDS = ("raw", "shrunk", "pd_corrected")


def _as_float_matrix(x):
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim == 1:
        arr = arr[:, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ObservationSet:
    """n samples of (Y in R^k, A in {0,1}, X in R^d).

    Construction only coerces to arrays; content rules are reported by
    :func:`validate` so that malformed inputs can be inspected rather than
    rejected blind. Estimation entry points call :func:`check_observations`.
    """

    outcomes: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "outcomes", _as_float_matrix(self.outcomes))
        object.__setattr__(self, "covariates", _as_float_matrix(self.covariates))
        treat = np.array(self.treatment, dtype=float, copy=True).ravel()
        treat.setflags(write=False)
        object.__setattr__(self, "treatment", treat)

    @property
    def n(self):
        return self.outcomes.shape[0]

    @property
    def k(self):
        return self.outcomes.shape[1]

    @property
    def d(self):
        return self.covariates.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices)
        return ObservationSet(self.outcomes[idx], self.treatment[idx], self.covariates[idx])


@dataclass(frozen=True)
class Violation:
    """One broken observation-set rule with its location (row/col may be None)."""

    field: str
    message: str
    row: Optional[int] = None
    col: Optional[int] = None

    def __str__(self):
        loc = ""
        if self.row is not None:
            loc = f" at row {self.row}" + (f", col {self.col}" if self.col is not None else "")
        return f"{self.field}{loc}: {self.message}"


def validate(data: ObservationSet):
    """Report every broken invariant of an observation set. Never raises.

    Returns an empty list iff the set is well formed: shared row count n >= 2,
    k in [1, 64], d >= 1, treatment exactly 0/1, all entries finite.
    """
    out = []
    n_y, n_a, n_x = data.outcomes.shape[0], data.treatment.shape[0], data.covariates.shape[0]
    if not (n_y == n_a == n_x):
        out.append(Violation("shape", f"row counts differ: outcomes {n_y}, treatment {n_a}, covariates {n_x}"))
    if n_y < 2:
        out.append(Violation("outcomes", f"need n >= 2 rows, got {n_y}"))
    if data.k < 1:
        out.append(Violation("outcomes", "need k >= 1 outcome columns"))
    if data.k > MAX_OUTCOMES:
        out.append(Violation("outcomes", f"k={data.k} exceeds the dense-solver limit {MAX_OUTCOMES}"))
    if data.d < 1:
        out.append(Violation("covariates", "need d >= 1 covariate columns"))
    for row, col in zip(*np.nonzero(~np.isfinite(data.outcomes))):
        out.append(Violation("outcomes", "non-finite entry", int(row), int(col)))
    for row, col in zip(*np.nonzero(~np.isfinite(data.covariates))):
        out.append(Violation("covariates", "non-finite entry", int(row), int(col)))
    finite_a = np.isfinite(data.treatment)
    for row in np.nonzero(~finite_a)[0]:
        out.append(Violation("treatment", "non-finite entry", int(row)))
    bad = finite_a & ~np.isin(data.treatment, (0.0, 1.0))
    for row in np.nonzero(bad)[0]:
        out.append(Violation("treatment", f"value {data.treatment[row]!r} is not 0 or 1", int(row)))
    return out


def check_observations(data: ObservationSet, where="model"):
    """Raise DataError listing all violations; used by estimation entry points."""
    violations = validate(data)
    if violations:
        listing = "; ".join(str(v) for v in violations[:10])
        more = "" if len(violations) <= 10 else f" (+{len(violations) - 10} more)"
        raise DataError(f"{where}: invalid observation set: {listing}{more}")


@dataclass(frozen=True)
class Calibration:
    """Provenance tag of a covariance matrix: raw, shrunk(rho, nu) or pd_corrected(tau)."""

    kind: str = "raw"
    rho: Optional[float] = None
    nu: Optional[float] = None
    tau: Optional[float] = None

    def __post_init__(self):
        if self.kind not in CALIBRATION_KINDS:
            raise DataError(f"model: calibration kind {self.kind!r} not in {CALIBRATION_KINDS}")
        if self.kind == "shrunk" and not (self.rho is not None and 0.0 <= self.rho <= 1.0):
            raise DataError("model: shrunk calibration requires rho in [0, 1]")
        if self.kind == "pd_corrected" and not (self.tau is not None and self.tau > 0):
            raise DataError("model: pd_corrected calibration requires tau > 0")


@dataclass(frozen=True)
class CounterfactualMoments:
    """Estimated mean vector and covariance matrix of Y^a for one arm.

    The covariance is symmetrized to (M + M')/2 on construction so downstream
    eigendecompositions are deterministic regardless of accumulation order.
    """

    mean: np.ndarray
    covariance: np.ndarray
    arm: int
    calibration: Calibration = field(default_factory=Calibration)
    estimator_kind: str = "doubly_robust"
    source_fold: Optional[object] = None  # eval-fold id, matched by calibration.shrink

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float, copy=True).ravel()
        cov = np.array(self.covariance, dtype=float, copy=True)
        if cov.shape != (mean.size, mean.size):
            raise DataError(f"model: covariance shape {cov.shape} does not match k={mean.size}")
        cov = symmetrize(cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if self.arm not in (0, 1):
            raise DataError(f"model: arm must be 0 or 1, got {self.arm!r}")
        if self.estimator_kind not in ESTIMATOR_KINDS:
            raise DataError(f"model: estimator_kind {self.estimator_kind!r} not in {ESTIMATOR_KINDS}")
        if self.calibration.kind == "shrunk" and np.mean(np.diag(cov)) > 0 and not (self.calibration.nu > 0):
            raise DataError("model: shrunk calibration requires nu > 0 when the diagonal average is positive")

    @property
    def k(self):
        return self.mean.size

    def with_covariance(self, covariance, calibration):
        return CounterfactualMoments(self.mean, covariance, self.arm, calibration,
                                     self.estimator_kind, self.source_fold)


def _constraint_pair(pair, k, name):
    if pair is None:
        return None
    mat, vec = pair
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    vec = np.atleast_1d(np.asarray(vec, dtype=float))
    if mat.shape != (vec.size, k):
        raise DataError(f"model: {name} shapes {mat.shape} / {vec.shape} inconsistent with k={k}")
    if not np.all(np.isfinite(mat)):
        raise DataError(f"model: {name} matrix has non-finite entries")
    return mat, vec


@dataclass(frozen=True)
class MVProgram:
    """A counterfactual mean-variance program: minimize (1/2) w'Σw − λ w'm over w.

    The default feasible set is the simplex {w'1 = 1, w >= 0} plus the
    weighted-mean floor w'm >= min_return when that floor is finite.
    """

    moments: CounterfactualMoments
    risk_tolerance: float = 0.0
    min_return: float = -np.inf
    extra_ineq: Optional[Tuple[np.ndarray, np.ndarray]] = None  # C w <= d
    extra_eq: Optional[Tuple[np.ndarray, np.ndarray]] = None    # F w =  e
    include_simplex: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.risk_tolerance) and self.risk_tolerance >= 0):
            raise DataError(f"model: risk_tolerance must be a finite nonnegative real, got {self.risk_tolerance!r}")
        k = self.moments.k
        object.__setattr__(self, "extra_ineq", _constraint_pair(self.extra_ineq, k, "extra_ineq"))
        object.__setattr__(self, "extra_eq", _constraint_pair(self.extra_eq, k, "extra_eq"))

    @property
    def k(self):
        return self.moments.k


@dataclass(frozen=True)
class QPSolution:
    """Primal-dual QP solution with KKT diagnostics.

    duals_ineq has one nonnegative entry per inequality row (zero off the
    active set); duals_eq is free. kkt_residual is the stationarity norm
    ||∇f(w) + C_act' γ_act + F' ν||_2.
    """

    weights: np.ndarray
    duals_ineq: np.ndarray
    duals_eq: np.ndarray
    active_set: Tuple[int, ...]
    kkt_residual: float
    licq_ok: bool
    sc_ok: bool
    objective: float

    def __post_init__(self):
        for name in ("weights", "duals_ineq", "duals_eq"):
            arr = np.array(getattr(self, name), dtype=float, copy=True).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "active_set", tuple(int(j) for j in self.active_set))
