"""Uncentered influence-function evaluation and moment estimation.

For one arm a the per-sample evaluations are

    phi_i(Z)  = 1(A=a)/pi_a(X) * (Y_i - mu_i(X, a))   + mu_i(X, a)
    phi_ij(Z) = 1(A=a)/pi_a(X) * (Y_i Y_j - s_ij(X, a)) + s_ij(X, a)

and the doubly-robust estimates are their plain 1/n averages, with the
covariance cross term m_i * m_j subtracted (no n/(n-1) correction). Plug-in
and inverse-probability-weighted estimators share the same fitted nuisances.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, SplitError
from .model import Calibration, CounterfactualMoments, ObservationSet, check_observations
from .nuisance import LearnerSpec, NuisanceFit, SplitPlan, fit_nuisances, make_split
from ._utils import packed_index, packed_index_pairs, unpack_symmetric


@dataclass(frozen=True)
class InfluenceMatrix:
    """Per-sample influence evaluations on one evaluation fold.

    phi_mean is n x k; phi_second is n x k(k+1)/2 packed with i <= j. Column
    means of phi_mean equal the reported mean estimate to float precision.
    Diagonal phi_second columns may be negative: the weighted residual term
    has no sign constraint.
    """

    arm: int
    phi_mean: np.ndarray
    phi_second: np.ndarray
    eval_fold: Optional[object] = None

    @property
    def n(self):
        return self.phi_mean.shape[0]

    @property
    def k(self):
        return self.phi_mean.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices)
        return InfluenceMatrix(self.arm, self.phi_mean[idx], self.phi_second[idx], self.eval_fold)

    def moments(self):
        """(mean, covariance) implied by the stored evaluations."""
        m = self.phi_mean.mean(axis=0)
        second = unpack_symmetric(self.phi_second.mean(axis=0), self.k)
        return m, second - np.outer(m, m)


def _check_arm(arm):
    if arm not in (0, 1):
        raise DataError(f"influence: arm must be 0 or 1, got {arm!r}")


def _resolve_eval_rows(data, fit, eval_indices):
    if eval_indices is None:
        if fit.trained_on:
            raise SplitError(
                "influence: evaluation over all rows is only valid for oracle fits; "
                "this fit was trained on data rows, so pass a disjoint evaluation fold"
            )
        return np.arange(data.n)
    idx = np.asarray(eval_indices, dtype=np.int64)
    overlap = fit.trained_on.intersection(int(i) for i in idx)
    if overlap:
        raise SplitError(
            "influence: evaluation fold overlaps the nuisance training fold "
            f"(e.g. row {min(overlap)}); sample splitting requires disjoint folds"
        )
    return idx


def _packed_products(Y):
    k = Y.shape[1]
    pairs = packed_index_pairs(k)
    out = np.empty((Y.shape[0], len(pairs)))
    for pos, (i, j) in enumerate(pairs):
        out[:, pos] = Y[:, i] * Y[:, j]
    return out


def _evaluate_parts(data, fit, arm, idx):
    X, A, Y = data.covariates[idx], data.treatment[idx], data.outcomes[idx]
    pa = fit.predict_propensity(X, arm)
    weight = (A == arm).astype(float) / pa
    mu = fit.predict_outcome_matrix(X, arm)
    sig = fit.predict_second_moment_matrix(X, arm)
    return Y, _packed_products(Y), weight, mu, sig


def phi_matrices(data: ObservationSet, fit, arm: int, eval_indices=None):
    """Influence evaluations for the given rows: (phi_mean n x k, phi_second n x P)."""
    _check_arm(arm)
    idx = _resolve_eval_rows(data, fit, eval_indices)
    Y, Yp, weight, mu, sig = _evaluate_parts(data, fit, arm, idx)
    phi_mean = weight[:, None] * (Y - mu) + mu
    phi_second = weight[:, None] * (Yp - sig) + sig
    return phi_mean, phi_second


def phi_mean_at(fit, y_row, treatment, x_row, arm, i):
    """Influence value for one observation and one outcome coordinate."""
    pa = float(fit.predict_propensity(np.atleast_2d(x_row), arm)[0])
    mu = fit.predict_outcome(x_row, arm, i)
    if int(treatment) != arm:
        return mu
    return (float(np.atleast_1d(y_row)[i]) - mu) / pa + mu


def phi_second_at(fit, y_row, treatment, x_row, arm, i, j):
    """Influence value for one observation and one (i, j) second-moment entry."""
    pa = float(fit.predict_propensity(np.atleast_2d(x_row), arm)[0])
    sig = fit.predict_second_moment(x_row, arm, i, j)
    if int(treatment) != arm:
        return sig
    y = np.atleast_1d(y_row)
    return (float(y[i] * y[j]) - sig) / pa + sig


def _moments_from_phi(phi_mean, phi_second, arm, fold):
    m = phi_mean.mean(axis=0)
    k = m.size
    second = unpack_symmetric(phi_second.mean(axis=0), k)
    cov = second - np.outer(m, m)
    return CounterfactualMoments(m, cov, arm, Calibration("raw"), "doubly_robust", source_fold=fold)


def estimate_moments_dr(data: ObservationSet, fit, arm: int, eval_indices=None, eval_fold=None):
    """Doubly-robust moment estimates plus the influence matrix they averaged.

    The evaluation fold must be disjoint from the fit's training fold
    (omit eval_indices only for oracle fits that trained on no rows).
    """
    check_observations(data, where="influence.estimate_moments_dr")
    phi_mean, phi_second = phi_matrices(data, fit, arm, eval_indices)
    infl = InfluenceMatrix(arm, phi_mean, phi_second, eval_fold)
    return _moments_from_phi(phi_mean, phi_second, arm, eval_fold), infl


def estimate_moments_plugin(data: ObservationSet, fit, arm: int, eval_indices=None, eval_fold=None):
    """Plug-in (g-computation) moments: averages of the fitted regressions."""
    check_observations(data, where="influence.estimate_moments_plugin")
    _check_arm(arm)
    idx = _resolve_eval_rows(data, fit, eval_indices)
    _, _, _, mu, sig = _evaluate_parts(data, fit, arm, idx)
    m = mu.mean(axis=0)
    cov = unpack_symmetric(sig.mean(axis=0), data.k) - np.outer(m, m)
    return CounterfactualMoments(m, cov, arm, Calibration("raw"), "plugin", source_fold=eval_fold)


def estimate_moments_ipw(data: ObservationSet, fit, arm: int, eval_indices=None, eval_fold=None):
    """Horvitz-Thompson moments reweighted by the fitted propensity."""
    check_observations(data, where="influence.estimate_moments_ipw")
    _check_arm(arm)
    idx = _resolve_eval_rows(data, fit, eval_indices)
    Y, Yp, weight, _, _ = _evaluate_parts(data, fit, arm, idx)
    m = (weight[:, None] * Y).mean(axis=0)
    second = unpack_symmetric((weight[:, None] * Yp).mean(axis=0), data.k)
    return CounterfactualMoments(m, second - np.outer(m, m), arm, Calibration("raw"), "ipw",
                                 source_fold=eval_fold)


_ESTIMATORS = {
    "doubly_robust": estimate_moments_dr,
    "plugin": estimate_moments_plugin,
    "ipw": estimate_moments_ipw,
}


def estimate_moments_single_split(data: ObservationSet, spec: LearnerSpec, arm: int,
                                  kind: str = "doubly_robust", plan: SplitPlan = None,
                                  seed: int = 0, propensity_transform=None,
                                  regression_transform=None):
    """One-directional split flow: fit nuisances on fold 0, evaluate on fold 1.

    Returns (moments, influence-or-None, fit).
    """
    if kind not in _ESTIMATORS:
        raise DataError(f"influence: unknown estimator kind {kind!r}")
    if plan is None:
        plan = make_split(data.n, "single_split", seed)
    train, evaluate = plan.fold_indices(0), plan.fold_indices(1)
    fit = fit_nuisances(data, train, spec, propensity_transform=propensity_transform,
                        regression_transform=regression_transform)
    if kind == "doubly_robust":
        moments, infl = estimate_moments_dr(data, fit, arm, evaluate, eval_fold=1)
        return moments, infl, fit
    moments = _ESTIMATORS[kind](data, fit, arm, evaluate, eval_fold=1)
    return moments, None, fit


def estimate_moments_crossfit(data: ObservationSet, spec: LearnerSpec, plan: SplitPlan,
                              arm: int, kind: str = "doubly_robust"):
    """Cross-fitting: for each fold, fit on the complement and evaluate on the fold;
    the estimate is the fold-size-weighted average, the influence matrix is stitched
    over all n rows. A 2-fold plan runs both directions of the single split.

    Returns (moments, influence-or-None).
    """
    check_observations(data, where="influence.estimate_moments_crossfit")
    if kind not in _ESTIMATORS:
        raise DataError(f"influence: unknown estimator kind {kind!r}")
    if plan.fold_assignment.shape[0] != data.n:
        raise SplitError("influence: split plan length does not match the dataset")
    if plan.n_folds < 2:
        raise SplitError("influence: cross-fitting needs at least 2 folds")
    min_rows = max(10, 2 * data.k)
    for f in range(plan.n_folds):
        if plan.fold_indices(f).size < min_rows:
            raise SplitError(
                f"influence: fold {f} has {plan.fold_indices(f).size} rows; "
                f"each fold needs >= max(10, 2k) = {min_rows}"
            )

    k = data.k
    mean_acc = np.zeros(k)
    cov_acc = np.zeros((k, k))
    phi_mean_full = np.zeros((data.n, k)) if kind == "doubly_robust" else None
    phi_second_full = np.zeros((data.n, len(packed_index_pairs(k)))) if kind == "doubly_robust" else None

    for f in range(plan.n_folds):
        evaluate = plan.fold_indices(f)
        fit = fit_nuisances(data, plan.complement_indices(f), spec)
        weight = evaluate.size / data.n
        if kind == "doubly_robust":
            moments_f, infl_f = estimate_moments_dr(data, fit, arm, evaluate, eval_fold=f)
            phi_mean_full[evaluate] = infl_f.phi_mean
            phi_second_full[evaluate] = infl_f.phi_second
        else:
            moments_f = _ESTIMATORS[kind](data, fit, arm, evaluate, eval_fold=f)
        mean_acc += weight * moments_f.mean
        cov_acc += weight * moments_f.covariance

    moments = CounterfactualMoments(mean_acc, cov_acc, arm, Calibration("raw"), kind,
                                    source_fold="crossfit")
    if kind != "doubly_robust":
        return moments, None
    infl = InfluenceMatrix(arm, phi_mean_full, phi_second_full, eval_fold="crossfit")
    return moments, infl
