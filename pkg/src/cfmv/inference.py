"""Uncertainty quantification for estimated optimal weights.

Two routes: nonparametric bootstrap percentile intervals (nuisances held fixed
across resamples, justified by sample splitting), and a plug-in asymptotic
covariance from the KKT sensitivity expansion

    sqrt(n) (w_hat - w*) ~ [K^-1]_{1:k} * Upsilon,
    K = [[Q, G'], [G, 0]],  G = active inequality rows stacked with equalities,

where Upsilon stacks the per-sample influence of the estimated KKT
coefficients: the objective-gradient block (Sigma_hat - Sigma) w - lambda
(m_hat - m), plus the active weighted-mean-floor row when present. Rows whose
coefficients are deterministic (bounds, budget, user constants) contribute
zeros. The expansion needs LICQ and strict complementarity; without them the
call refuses with a typed error rather than returning an invalid covariance.
"""

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .calibration import apply_calibration
from .errors import CfmvError, InferenceError
from .influence import InfluenceMatrix, estimate_moments_dr, estimate_moments_single_split
from .model import Calibration, CounterfactualMoments, MVProgram, ObservationSet, QPSolution
from .nuisance import LearnerSpec, make_split
from .qp import compile_program, solve
from ._utils import packed_index_pairs


@dataclass(frozen=True)
class ProgramTemplate:
    """Program settings reused across resamples/replications: everything in an
    MVProgram except the moments, plus the estimation arm and the calibration
    pipeline applied before each solve."""

    arm: int = 1
    risk_tolerance: float = 0.0
    min_return: float = -np.inf
    include_simplex: bool = True
    extra_ineq: Optional[Tuple] = None
    extra_eq: Optional[Tuple] = None
    calibration: str = "shrink+pd"

    def build(self, moments: CounterfactualMoments) -> MVProgram:
        return MVProgram(moments, risk_tolerance=self.risk_tolerance,
                         min_return=self.min_return, extra_ineq=self.extra_ineq,
                         extra_eq=self.extra_eq, include_simplex=self.include_simplex)


def solve_template(moments: CounterfactualMoments, infl, template: ProgramTemplate):
    """calibrate -> compile -> solve. Returns (solution, calibrated moments, program)."""
    n_for_tau = infl.n if infl is not None else None
    calibrated, _ = apply_calibration(moments, infl, template.calibration, n_for_tau=n_for_tau)
    program = template.build(calibrated)
    sol = solve(compile_program(program))
    return sol, calibrated, program


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile bootstrap summary. weight_draws has one row per resample with
    NaN rows for non-converged resamples; failures/B > 5% flips `reliable`."""

    B: int
    weight_draws: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float
    failures: int
    point_estimate: np.ndarray
    reliable: bool


def _percentile_interval(draws, level):
    alpha = 1.0 - level
    return (np.quantile(draws, alpha / 2.0, axis=0),
            np.quantile(draws, 1.0 - alpha / 2.0, axis=0))


def _check_bootstrap_args(B, level):
    if B < 200:
        raise InferenceError(f"inference.bootstrap_weights: B must be >= 200, got {B}")
    if not 0.0 < level < 1.0:
        raise InferenceError(f"inference.bootstrap_weights: level must lie in (0, 1), got {level}")


def bootstrap_weights(data: ObservationSet, fit, template: ProgramTemplate,
                      B: int = 500, level: float = 0.95, seed: int = 0,
                      eval_indices=None) -> BootstrapResult:
    """Resample the evaluation fold with replacement, re-estimate, re-calibrate,
    re-solve; nuisances stay fixed (they are functions of the disjoint training
    fold). Deterministic given the seed.

    The per-resample moments are recomputed from the rows of the influence
    matrix; with a fixed fit this is exactly the estimator applied to the
    resampled fold.
    """
    _check_bootstrap_args(B, level)
    moments, infl = estimate_moments_dr(data, fit, template.arm, eval_indices)
    point_sol, _, _ = solve_template(moments, infl, template)

    n = infl.n
    k = infl.k
    rng = np.random.default_rng(seed)
    draws = np.full((B, k), np.nan)
    failures = 0
    for b in range(B):
        idx = rng.integers(0, n, size=n)
        infl_b = infl.subset(idx)
        m_b, cov_b = infl_b.moments()
        moments_b = CounterfactualMoments(m_b, cov_b, template.arm, Calibration("raw"),
                                          "doubly_robust", source_fold=infl.eval_fold)
        try:
            sol_b, _, _ = solve_template(moments_b, infl_b, template)
            draws[b] = sol_b.weights
        except CfmvError:
            failures += 1

    ok = draws[~np.isnan(draws).any(axis=1)]
    if ok.shape[0] == 0:
        raise InferenceError("inference.bootstrap_weights: every resample failed to solve")
    ci_lower, ci_upper = _percentile_interval(ok, level)
    if np.any(point_sol.weights < ci_lower - 1e-12) or np.any(point_sol.weights > ci_upper + 1e-12):
        warnings.warn("inference.bootstrap_weights: point estimate lies outside the percentile "
                      "interval; the bootstrap distribution is strongly skewed", stacklevel=2)
    return BootstrapResult(B=B, weight_draws=draws, ci_lower=ci_lower, ci_upper=ci_upper,
                           level=level, failures=failures, point_estimate=point_sol.weights,
                           reliable=failures / B <= 0.05)


def bootstrap_weights_refit(data: ObservationSet, spec: LearnerSpec, template: ProgramTemplate,
                            B: int = 500, level: float = 0.95, seed: int = 0) -> BootstrapResult:
    """Opt-in full bootstrap that refits nuisances on every resample (costly;
    the fixed-nuisance variant is the default)."""
    _check_bootstrap_args(B, level)
    moments0, infl0, _ = estimate_moments_single_split(data, spec, template.arm, "doubly_robust",
                                                       seed=seed)
    point_sol, _, _ = solve_template(moments0, infl0, template)

    rng = np.random.default_rng(seed)
    draws = np.full((B, data.k), np.nan)
    failures = 0
    for b in range(B):
        idx = rng.integers(0, data.n, size=data.n)
        try:
            resampled = data.subset(idx)
            plan_b = make_split(data.n, "single_split", seed=int(rng.integers(2**31)))
            m_b, infl_b, _ = estimate_moments_single_split(resampled, spec, template.arm,
                                                           "doubly_robust", plan=plan_b)
            sol_b, _, _ = solve_template(m_b, infl_b, template)
            draws[b] = sol_b.weights
        except CfmvError:
            failures += 1
    ok = draws[~np.isnan(draws).any(axis=1)]
    if ok.shape[0] == 0:
        raise InferenceError("inference.bootstrap_weights_refit: every resample failed to solve")
    ci_lower, ci_upper = _percentile_interval(ok, level)
    return BootstrapResult(B=B, weight_draws=draws, ci_lower=ci_lower, ci_upper=ci_upper,
                           level=level, failures=failures, point_estimate=point_sol.weights,
                           reliable=failures / B <= 0.05)


@dataclass(frozen=True)
class AsymptoticCovariance:
    """Plug-in covariance of sqrt(n)(w_hat - w*), defined only under LICQ + SC.

    cov_w is the top-left k x k block of K^-1 cov(Upsilon) K^-1', projected to
    PSD by clipping eigenvalues at zero; per-coordinate variances of w_hat are
    cov_w[i, i] / n_eval.
    """

    cov_w: np.ndarray
    kkt_matrix: np.ndarray
    upsilon_cov: np.ndarray
    n_eval: int


def asymptotic_covariance(infl: InfluenceMatrix, moments: CounterfactualMoments,
                          sol: QPSolution, program: MVProgram) -> AsymptoticCovariance:
    """Assemble the sensitivity covariance at the solved program.

    `moments` must be the raw doubly-robust estimates matched to `infl`;
    `program` is the (calibrated) program that produced `sol`. The per-sample
    influence of the covariance estimate is assembled from phi_second and
    phi_mean by the delta method with gradient [-m_j, -m_i, 1].
    """
    if not sol.sc_ok:
        raise InferenceError(
            "inference.asymptotic_covariance: asymptotic expansion invalid at the boundary "
            "without strict complementarity (an active constraint has a zero dual)"
        )
    if not sol.licq_ok:
        raise InferenceError(
            "inference.asymptotic_covariance: active constraint rows are linearly dependent "
            "(LICQ fails), so the KKT sensitivity system is singular"
        )
    if moments.estimator_kind != "doubly_robust":
        raise InferenceError(
            "inference.asymptotic_covariance: requires doubly_robust moments "
            f"(got {moments.estimator_kind!r})"
        )
    if moments.source_fold != infl.eval_fold or moments.k != infl.k:
        raise InferenceError("inference.asymptotic_covariance: influence matrix does not match the moments")

    qp = compile_program(program)
    k = infl.k
    n = infl.n
    w = sol.weights
    lam = program.risk_tolerance
    active = list(sol.active_set)

    phi_c = infl.phi_mean - infl.phi_mean.mean(axis=0)
    sec_c = infl.phi_second - infl.phi_second.mean(axis=0)

    # (Phi_t w)_i = sum_j [sec_c(i,j) - m_j phi_c(i) - m_i phi_c(j)] w_j via a packed map
    m_hat = moments.mean
    pack_map = np.zeros((len(packed_index_pairs(k)), k))
    for pos, (i, j) in enumerate(packed_index_pairs(k)):
        pack_map[pos, i] += w[j]
        if i != j:
            pack_map[pos, j] += w[i]
    cov_grad = sec_c @ pack_map - (m_hat @ w) * phi_c - np.outer(phi_c @ w, m_hat)
    grad_block = cov_grad - lam * phi_c

    gamma_ret = 0.0
    ret_cols = {}
    for row_pos, j in enumerate(active):
        if qp.ineq_kinds[j] == "min_return":
            gamma_ret += sol.duals_ineq[j]
            ret_cols[row_pos] = True
    if gamma_ret:
        grad_block = grad_block - gamma_ret * phi_c

    q = len(active) + qp.b_eq.size
    u = np.zeros((n, k + q))
    u[:, :k] = grad_block
    for row_pos in ret_cols:
        u[:, k + row_pos] = -(phi_c @ w)

    u_c = u - u.mean(axis=0)
    upsilon_cov = (u_c.T @ u_c) / n

    G = np.vstack([qp.A_ineq[active], qp.A_eq]) if q else np.zeros((0, k))
    K = np.block([[qp.Q, G.T], [G, np.zeros((q, q))]]) if q else qp.Q
    try:
        K_inv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise InferenceError(f"inference.asymptotic_covariance: KKT matrix is singular ({exc})") from exc
    top = K_inv[:k, :]
    raw_cov = top @ upsilon_cov @ top.T
    raw_cov = (raw_cov + raw_cov.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(raw_cov)
    cov_w = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
    cov_w = (cov_w + cov_w.T) / 2.0
    return AsymptoticCovariance(cov_w=cov_w, kkt_matrix=K, upsilon_cov=upsilon_cov, n_eval=n)
