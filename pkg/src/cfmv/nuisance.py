"""Nuisance regressions: propensity, outcome means, and conditional second moments.

A NuisanceFit bundles one propensity model and the k(k+3)/2 regressions fitted
jointly over (X, A) with treatment interacted with the basis. Fitting is pure
given (data, fold, spec): identical inputs give bit-identical predictions.
"""

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .errors import NuisanceError, SplitError
from .model import ObservationSet, check_observations
from ._utils import packed_index, packed_index_pairs, packed_size

PROPENSITY_LEARNERS = ("logistic_irls", "logistic_with_basis")
REGRESSION_LEARNERS = ("ols", "ridge", "ridge_with_basis", "kernel_ridge")


@dataclass(frozen=True)
class LearnerSpec:
    """Built-in learner configuration standing in for an external ensemble stack."""

    propensity_learner: str = "logistic_irls"
    propensity_degree: int = 1
    regression_learner: str = "ols"
    regression_degree: int = 1
    regression_penalty: float = 0.0
    kernel_bandwidth: float = 1.0
    clip_epsilon: float = 0.01

    def __post_init__(self):
        if self.propensity_learner not in PROPENSITY_LEARNERS:
            raise NuisanceError(f"nuisance: unknown propensity learner {self.propensity_learner!r}")
        if self.regression_learner not in REGRESSION_LEARNERS:
            raise NuisanceError(f"nuisance: unknown regression learner {self.regression_learner!r}")
        if not 0.0 < self.clip_epsilon < 0.5:
            raise NuisanceError(f"nuisance: clip_epsilon must lie in (0, 0.5), got {self.clip_epsilon}")
        for name in ("propensity_degree", "regression_degree"):
            if getattr(self, name) not in (1, 2, 3):
                raise NuisanceError(f"nuisance: {name} must be one of 1, 2, 3")
        if self.regression_penalty < 0:
            raise NuisanceError("nuisance: regression penalty must be >= 0")
        if self.kernel_bandwidth <= 0:
            raise NuisanceError("nuisance: kernel bandwidth must be > 0")


@dataclass(frozen=True)
class SplitPlan:
    """Fold assignment over rows 0..n-1. single_split means two folds whose
    sizes differ by at most one; crossfit(K) means K balanced folds."""

    mode: str
    n_folds: int
    fold_assignment: np.ndarray
    seed: int

    def fold_indices(self, fold):
        return np.where(self.fold_assignment == fold)[0]

    def complement_indices(self, fold):
        return np.where(self.fold_assignment != fold)[0]


def make_split(n: int, mode: str = "single_split", seed: int = 0, n_folds: int = 2) -> SplitPlan:
    """Deterministic balanced fold assignment.

    single_split gives exactly two folds of sizes differing by <= 1; crossfit
    partitions into n_folds balanced folds, each of size >= 10.
    """
    if mode not in ("single_split", "crossfit"):
        raise SplitError(f"nuisance.make_split: unknown mode {mode!r}")
    if mode == "single_split":
        n_folds = 2
    if n_folds < 2:
        raise SplitError("nuisance.make_split: crossfit needs at least 2 folds")
    if n < 20:
        raise SplitError(f"nuisance.make_split: need n >= 20, got {n}")
    if n // n_folds < 10:
        raise SplitError(
            f"nuisance.make_split: n={n} too small for {n_folds} folds of >= 10 rows; "
            f"need n >= {10 * n_folds}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    # first (n % n_folds) folds absorb the remainder, keeping sizes within 1
    sizes = np.full(n_folds, n // n_folds)
    sizes[: n % n_folds] += 1
    pos = 0
    for fold, size in enumerate(sizes):
        assignment[order[pos: pos + size]] = fold
        pos += size
    assignment.setflags(write=False)
    return SplitPlan(mode=mode, n_folds=n_folds, fold_assignment=assignment, seed=seed)


def polynomial_basis(X, degree):
    """All monomials of total degree <= degree, intercept first."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            cols.append(np.prod(X[:, combo], axis=1))
    return np.column_stack(cols)


class _Standardizer:
    """Z-scores non-intercept design columns; fitted on the training design.

    Keeps normal equations well conditioned when basis columns live on very
    different scales (e.g. transformed covariates). Constant columns are left
    untouched.
    """

    def __init__(self, design):
        self.mean = design.mean(axis=0)
        scale = design.std(axis=0)
        keep = scale <= 1e-12
        self.mean[keep] = 0.0
        scale[keep] = 1.0
        self.scale = scale
        self.mean[0] = 0.0  # intercept column stays exactly 1
        self.scale[0] = 1.0

    def apply(self, design):
        return (design - self.mean) / self.scale


def _fit_logistic_irls(design, y, penalty=0.0, max_iter=100, tol=1e-10):
    """Newton/IRLS for logistic regression; returns (beta, converged)."""
    n, p = design.shape
    beta = np.zeros(p)
    ridge = penalty * np.eye(p)
    for _ in range(max_iter):
        eta = design @ beta
        prob = expit(eta)
        w = np.maximum(prob * (1.0 - prob), 1e-10)
        grad = design.T @ (y - prob) - penalty * beta
        hess = (design * w[:, None]).T @ design + ridge
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return beta, False
        if np.max(np.abs(step)) < tol:
            return beta, True
    return beta, np.max(np.abs(beta)) < 1e3


class _LogisticModel:
    """IRLS on the standardized design with a ridge fallback (penalty 1e-6)
    on separation or numerical failure."""

    def __init__(self, design, y):
        self.standardizer = _Standardizer(design)
        std = self.standardizer.apply(design)
        beta, ok = _fit_logistic_irls(std, y)
        if not (ok and np.all(np.isfinite(beta))):
            beta, _ = _fit_logistic_irls(std, y, penalty=1e-6)
        self.coef = beta

    def predict_proba(self, design):
        return expit(self.standardizer.apply(design) @ self.coef)


class _LinearModel:
    """Multi-target OLS/ridge on a shared standardized design; one
    factorization for all targets."""

    def __init__(self, design, targets, penalty):
        self.standardizer = _Standardizer(design)
        std = self.standardizer.apply(design)
        if penalty == 0.0:
            coef, *_ = np.linalg.lstsq(std, targets, rcond=None)
        else:
            p = std.shape[1]
            reg = penalty * np.eye(p)
            reg[0, 0] = 0.0  # intercept unpenalized
            coef = np.linalg.solve(std.T @ std + reg, std.T @ targets)
        self.coef = coef

    def predict(self, design):
        return self.standardizer.apply(design) @ self.coef


class _KernelRidgeModel:
    """Gaussian-kernel ridge on joint (X, A) inputs, shared across targets."""

    def __init__(self, U, targets, bandwidth, penalty):
        self.U = U
        self.bandwidth = bandwidth
        K = self._gram(U, U)
        self.alpha = np.linalg.solve(K + (penalty + 1e-12) * np.eye(len(U)), targets)

    def _gram(self, A, B):
        sq = (np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T)
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * self.bandwidth**2))

    def predict(self, U_new):
        return self._gram(U_new, self.U) @ self.alpha


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted nuisance functions for one training fold.

    Propensity outputs are clipped into [eps, 1-eps]; second-moment lookups are
    keyed on (min(i,j), max(i,j)). sigma_ii >= mu_i^2 is deliberately not
    enforced; negative implied conditional variances are handled downstream by
    covariance calibration.
    """

    spec: LearnerSpec
    k: int
    trained_on: frozenset
    _prop_model: object = field(repr=False)
    _reg_model: object = field(repr=False)
    _prop_transform: Optional[Callable] = field(repr=False, default=None)
    _reg_transform: Optional[Callable] = field(repr=False, default=None)

    def _prop_design(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._prop_transform is not None:
            X = self._prop_transform(X)
        degree = self.spec.propensity_degree if self.spec.propensity_learner == "logistic_with_basis" else 1
        return polynomial_basis(X, degree)

    def _reg_inputs(self, X, arm):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._reg_transform is not None:
            X = self._reg_transform(X)
        a = np.full(X.shape[0], float(arm))
        if self.spec.regression_learner == "kernel_ridge":
            return np.column_stack([X, a])
        degree = self.spec.regression_degree if self.spec.regression_learner == "ridge_with_basis" else 1
        B = polynomial_basis(X, degree)
        return np.hstack([B, a[:, None] * B])

    def predict_propensity(self, X, arm):
        """clip(P(A=arm | X), eps, 1-eps) for each row of X."""
        p1 = self._prop_model.predict_proba(self._prop_design(X))
        p = p1 if arm == 1 else 1.0 - p1
        eps = self.spec.clip_epsilon
        return np.clip(p, eps, 1.0 - eps)

    def predict_outcome_matrix(self, X, arm):
        """n x k matrix of mu_i(X, arm) predictions."""
        return self._reg_model.predict(self._reg_inputs(X, arm))[:, : self.k]

    def predict_second_moment_matrix(self, X, arm):
        """n x k(k+1)/2 matrix of sigma_ij(X, arm), packed with i <= j."""
        return self._reg_model.predict(self._reg_inputs(X, arm))[:, self.k:]

    def predict_outcome(self, x_row, arm, i):
        return float(self.predict_outcome_matrix(np.atleast_2d(x_row), arm)[0, i])

    def predict_second_moment(self, x_row, arm, i, j):
        pos = packed_index(i, j, self.k)
        return float(self.predict_second_moment_matrix(np.atleast_2d(x_row), arm)[0, pos])


def fit_nuisances(data: ObservationSet, train_indices, spec: LearnerSpec,
                  propensity_transform=None, regression_transform=None) -> NuisanceFit:
    """Fit propensity (X -> A) and the k(k+3)/2 regressions ((X, A) -> Y_i, Y_i Y_j)
    on the given training fold.

    The optional transforms replace the covariates fed to the propensity or
    regression learners (used by misspecification studies); predictions apply
    the same transform, so callers always pass raw X.
    """
    check_observations(data, where="nuisance.fit_nuisances")
    idx = np.asarray(train_indices, dtype=np.int64)
    X, A, Y = data.covariates[idx], data.treatment[idx], data.outcomes[idx]
    n1 = int(np.sum(A == 1))
    n0 = int(np.sum(A == 0))
    if min(n0, n1) < 5:
        raise NuisanceError(
            "nuisance.fit_nuisances: positivity violated in training fold "
            f"(arm counts {n0}/{n1}; each arm needs >= 5 rows)"
        )

    k = data.k
    pairs = packed_index_pairs(k)
    targets = np.empty((idx.size, k + packed_size(k)))
    targets[:, :k] = Y
    for pos, (i, j) in enumerate(pairs):
        targets[:, k + pos] = Y[:, i] * Y[:, j]

    Xp = propensity_transform(X) if propensity_transform is not None else X
    degree = spec.propensity_degree if spec.propensity_learner == "logistic_with_basis" else 1
    prop_model = _LogisticModel(polynomial_basis(Xp, degree), A)

    Xr = regression_transform(X) if regression_transform is not None else X
    if spec.regression_learner == "kernel_ridge":
        U = np.column_stack([Xr, A])
        reg_model = _KernelRidgeModel(U, targets, spec.kernel_bandwidth, spec.regression_penalty)
    else:
        degree = spec.regression_degree if spec.regression_learner == "ridge_with_basis" else 1
        B = polynomial_basis(Xr, degree)
        design = np.hstack([B, A[:, None] * B])
        penalty = spec.regression_penalty if spec.regression_learner != "ols" else 0.0
        reg_model = _LinearModel(design, targets, penalty)

    return NuisanceFit(
        spec=spec,
        k=k,
        trained_on=frozenset(int(i) for i in idx),
        _prop_model=prop_model,
        _reg_model=reg_model,
        _prop_transform=propensity_transform,
        _reg_transform=regression_transform,
    )
