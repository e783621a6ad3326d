"""Data-generating processes and Monte Carlo studies.

Two families: a multivariate-outcome confounded-Gaussian benchmark with a
known closed-form truth and optional covariate-transform misspecification, and
a two-outcome appointment-scheduling benchmark with Beta outcomes whose truth
is pinned down by a large Monte Carlo oracle.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from .calibration import apply_calibration, pd_correct
from .errors import CfmvError, DataError
from .influence import (estimate_moments_dr, estimate_moments_ipw,
                        estimate_moments_plugin)
from .model import CounterfactualMoments, MVProgram, ObservationSet
from .nuisance import LearnerSpec, fit_nuisances, make_split
from .qp import compile_program, solve
from ._utils import packed_index, packed_index_pairs, worker_count

KANG_PROPENSITY_COEF = np.array([-0.5, 0.25, -0.125, -0.05])
KANG_ALPHA_BASE = np.array([0.1, -0.1, 0.2, -0.2])


def transform_covariates(X):
    """The nonlinear covariate transform used for misspecification studies:
    (exp(X1/2), X2/(1+exp(X1)) + 10, (X1*X3/25 + 0.6)^3, (X2+X4+20)^2)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != 4:
        raise DataError(f"simbench.transform_covariates: needs d=4 covariates, got d={X.shape[1]}")
    return np.column_stack([
        np.exp(X[:, 0] / 2.0),
        X[:, 1] / (1.0 + np.exp(X[:, 0])) + 10.0,
        (X[:, 0] * X[:, 2] / 25.0 + 0.6) ** 3,
        (X[:, 1] + X[:, 3] + 20.0) ** 2,
    ])


@dataclass(frozen=True)
class OracleNuisance:
    """Closed-form nuisance functions packaged like a fitted NuisanceFit.

    trained_on is empty, so estimators may evaluate on every row.
    """

    k: int
    propensity_fn: object
    mean_fn: object
    second_fn: object
    clip_epsilon: float = 1e-3
    trained_on: frozenset = frozenset()

    def predict_propensity(self, X, arm):
        p1 = self.propensity_fn(np.atleast_2d(np.asarray(X, dtype=float)))
        p = p1 if arm == 1 else 1.0 - p1
        return np.clip(p, self.clip_epsilon, 1.0 - self.clip_epsilon)

    def predict_outcome_matrix(self, X, arm):
        return self.mean_fn(np.atleast_2d(np.asarray(X, dtype=float)), arm)

    def predict_second_moment_matrix(self, X, arm):
        return self.second_fn(np.atleast_2d(np.asarray(X, dtype=float)), arm)

    def predict_outcome(self, x_row, arm, i):
        return float(self.predict_outcome_matrix(np.atleast_2d(x_row), arm)[0, i])

    def predict_second_moment(self, x_row, arm, i, j):
        pos = packed_index(i, j, self.k)
        return float(self.predict_second_moment_matrix(np.atleast_2d(x_row), arm)[0, pos])


@dataclass(frozen=True)
class TrueMoments:
    mean: np.ndarray
    cov: np.ndarray
    optimal_weights: Optional[np.ndarray] = None


def _solve_true_program(mean, cov, risk_tolerance):
    cov_pd = cov if np.linalg.eigvalsh(cov)[0] > 1e-10 else pd_correct(cov, 1e-8)
    moments = CounterfactualMoments(mean, cov_pd, 1)
    program = MVProgram(moments, risk_tolerance=risk_tolerance)
    return solve(compile_program(program)).weights


class KangDGP:
    """Confounded Gaussian DGP with k outcomes and 4 standard-normal covariates.

    pi_1(X) = expit(-0.5 X1 + 0.25 X2 - 0.125 X3 - 0.05 X4)
    Y_i | X, A ~ N(b_i + A (d_i + X alpha_i), V_i),  independent across i given (X, A)

    so the counterfactual truth is m^a = b + a d and
    Sigma^a = diag(V) + a * alpha alpha'.
    """

    def __init__(self, k, coef_rng, noise_scale=1.0, confounding_scale=1.0):
        self.k = k
        self.b = coef_rng.uniform(-0.5, 0.5, k)
        self.d = coef_rng.uniform(-0.25, 0.25, k)
        self.alpha = (coef_rng.uniform(-0.5, 0.5, (k, 4)) + KANG_ALPHA_BASE) * confounding_scale
        self.V = coef_rng.uniform(1.5, 3.0, k) * noise_scale**2

    def propensity(self, X):
        return expit(X @ KANG_PROPENSITY_COEF)

    def conditional_mean(self, X, a):
        a = np.asarray(a, dtype=float)
        shift = self.d + X @ self.alpha.T
        return self.b + (a[:, None] if a.ndim else a) * shift

    def sample(self, n, rng):
        X = rng.standard_normal((n, 4))
        A = (rng.random(n) < self.propensity(X)).astype(float)
        mu = self.conditional_mean(X, A)
        Y = mu + rng.standard_normal((n, self.k)) * np.sqrt(self.V)
        return ObservationSet(Y, A, X)

    def true_mean(self, arm):
        return self.b + arm * self.d

    def true_cov(self, arm):
        return np.diag(self.V) + arm * (self.alpha @ self.alpha.T)

    def mc_moments(self, arm, draws, rng):
        """Monte Carlo oracle for the counterfactual moments (validates the closed form)."""
        X = rng.standard_normal((draws, 4))
        mu = self.conditional_mean(X, np.full(draws, float(arm)))
        Y = mu + rng.standard_normal((draws, self.k)) * np.sqrt(self.V)
        return Y.mean(axis=0), np.cov(Y.T, bias=True).reshape(self.k, self.k)

    def oracle_nuisance(self, clip_epsilon=1e-3):
        pairs = packed_index_pairs(self.k)

        def second_fn(X, a):
            mu = self.conditional_mean(X, np.full(X.shape[0], float(a)))
            out = np.empty((X.shape[0], len(pairs)))
            for pos, (i, j) in enumerate(pairs):
                out[:, pos] = mu[:, i] * mu[:, j] + (self.V[i] if i == j else 0.0)
            return out

        return OracleNuisance(
            k=self.k,
            propensity_fn=self.propensity,
            mean_fn=lambda X, a: self.conditional_mean(X, np.full(X.shape[0], float(a))),
            second_fn=second_fn,
            clip_epsilon=clip_epsilon,
        )


@dataclass(frozen=True)
class KangConfig:
    """Study configuration. DGP coefficients are drawn once per seed and held
    fixed across replications unless dgp_draws="per_rep", so the true optimal
    weights are well defined per study."""

    n: int
    k: int
    seed: int = 0
    use_transformed: str = "never"  # or "randomize_per_rep"
    dgp_draws: str = "fixed_at_seed"  # or "per_rep"
    risk_tolerance: float = 1.0
    noise_scale: float = 1.0
    confounding_scale: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise DataError("simbench: KangConfig needs k >= 1")
        if self.n < 100:
            raise DataError("simbench: KangConfig needs n >= 100")
        if self.use_transformed not in ("never", "randomize_per_rep"):
            raise DataError(f"simbench: unknown use_transformed {self.use_transformed!r}")
        if self.dgp_draws not in ("fixed_at_seed", "per_rep"):
            raise DataError(f"simbench: unknown dgp_draws {self.dgp_draws!r}")


@dataclass(frozen=True)
class KangTruth:
    means: Dict[int, np.ndarray]
    covs: Dict[int, np.ndarray]
    optimal_weights: Dict[int, np.ndarray]
    dgp: KangDGP = field(repr=False, default=None)


def _kang_dgp(config: KangConfig, coef_rng=None):
    if coef_rng is None:
        coef_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    return KangDGP(config.k, coef_rng, config.noise_scale, config.confounding_scale)


def _kang_truth(config, dgp):
    means, covs, weights = {}, {}, {}
    for arm in (0, 1):
        means[arm] = dgp.true_mean(arm)
        covs[arm] = dgp.true_cov(arm)
        weights[arm] = _solve_true_program(means[arm], covs[arm], config.risk_tolerance)
    return KangTruth(means=means, covs=covs, optimal_weights=weights, dgp=dgp)


def gen_kang(config: KangConfig):
    """One draw of the study data plus the closed-form truth (m^a, Sigma^a, w*)."""
    ss = np.random.SeedSequence(config.seed).spawn(2)
    dgp = _kang_dgp(config, np.random.default_rng(ss[0]))
    data = dgp.sample(config.n, np.random.default_rng(ss[1]))
    return data, _kang_truth(config, dgp)


@dataclass(frozen=True)
class SimReport:
    """Integrated bias/RMSE of estimated optimal weights across replications:
    bias = (1/k) sum_i |mean_s(w_hat_i - w*_i)|, RMSE the per-coordinate
    root-mean-square deviations averaged over coordinates."""

    estimator: str
    n: int
    B: int
    bias: float
    rmse: float
    bias_per_coordinate: np.ndarray
    rmse_per_coordinate: np.ndarray
    failures: int
    true_weights: Optional[np.ndarray] = None


DEFAULT_STUDY_LEARNERS = LearnerSpec(
    propensity_learner="logistic_irls",
    regression_learner="ridge_with_basis",
    regression_degree=2,
    regression_penalty=1e-6,
)


def _calibrate_for_study(moments, infl, calibration, n_eval):
    if moments.estimator_kind == "doubly_robust":
        calibrated, _ = apply_calibration(moments, infl, calibration, n_for_tau=n_eval)
        return calibrated
    # shrinkage is defined via the influence matrix, so PI/IPW only get pd correction
    if calibration == "none":
        return moments
    calibrated, _ = apply_calibration(moments, None, "pd", n_for_tau=n_eval)
    return calibrated


def _run_one_rep(dgp, config, estimators, calibration, spec, rng):
    data = dgp.sample(config.n, rng)
    plan = make_split(config.n, "single_split", seed=int(rng.integers(2**31)))
    train, evaluate = plan.fold_indices(0), plan.fold_indices(1)

    prop_tr = reg_tr = None
    if config.use_transformed == "randomize_per_rep":
        if rng.random() < 0.5:
            prop_tr = transform_covariates
        else:
            reg_tr = transform_covariates
    fit = fit_nuisances(data, train, spec, propensity_transform=prop_tr,
                        regression_transform=reg_tr)

    out = {}
    for estimator in estimators:
        try:
            if estimator == "doubly_robust":
                moments, infl = estimate_moments_dr(data, fit, 1, evaluate, eval_fold=1)
            elif estimator == "plugin":
                moments, infl = estimate_moments_plugin(data, fit, 1, evaluate, eval_fold=1), None
            elif estimator == "ipw":
                moments, infl = estimate_moments_ipw(data, fit, 1, evaluate, eval_fold=1), None
            else:
                raise DataError(f"simbench: unknown estimator {estimator!r}")
            calibrated = _calibrate_for_study(moments, infl, calibration, evaluate.size)
            program = MVProgram(calibrated, risk_tolerance=config.risk_tolerance)
            out[estimator] = solve(compile_program(program)).weights
        except CfmvError:
            out[estimator] = None
    return out


def run_sim_study(config: KangConfig, estimators=("plugin", "ipw", "doubly_robust"),
                  calibration="shrink", B=100, spec: LearnerSpec = None):
    """B replications of draw -> split -> fit -> estimate -> calibrate -> solve,
    reported per estimator. Nuisance fits are shared across estimators inside a
    replication; per-replication failures are counted, not fatal.

    With use_transformed="randomize_per_rep", each replication misspecifies
    either the propensity model or the outcome models (equal chance) by fitting
    it on transformed covariates.
    """
    if B < 50:
        raise DataError(f"simbench.run_sim_study: need B >= 50 replications, got {B}")
    spec = spec if spec is not None else DEFAULT_STUDY_LEARNERS

    ss = np.random.SeedSequence(config.seed)
    coef_stream, rep_stream = ss.spawn(2)
    dgp_fixed = _kang_dgp(config, np.random.default_rng(coef_stream))
    rep_rngs = [np.random.default_rng(s) for s in rep_stream.spawn(B)]

    def one(rng):
        if config.dgp_draws == "per_rep":
            dgp = KangDGP(config.k, rng, config.noise_scale, config.confounding_scale)
        else:
            dgp = dgp_fixed
        truth_w = (_solve_true_program(dgp.true_mean(1), dgp.true_cov(1), config.risk_tolerance)
                   if config.dgp_draws == "per_rep" else None)
        return _run_one_rep(dgp, config, estimators, calibration, spec, rng), truth_w

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, rep_rngs))
    else:
        results = [one(rng) for rng in rep_rngs]

    w_star_fixed = _solve_true_program(dgp_fixed.true_mean(1), dgp_fixed.true_cov(1),
                                       config.risk_tolerance)
    reports = []
    for estimator in estimators:
        deviations, failures = [], 0
        for rep_out, truth_w in results:
            w_hat = rep_out[estimator]
            if w_hat is None:
                failures += 1
                continue
            w_star = truth_w if truth_w is not None else w_star_fixed
            deviations.append(w_hat - w_star)
        dev = np.array(deviations).reshape(len(deviations), config.k)
        bias_pc = np.abs(dev.mean(axis=0)) if len(dev) else np.full(config.k, np.nan)
        rmse_pc = np.sqrt((dev**2).mean(axis=0)) if len(dev) else np.full(config.k, np.nan)
        reports.append(SimReport(
            estimator=estimator, n=config.n, B=B,
            bias=float(bias_pc.mean()), rmse=float(rmse_pc.mean()),
            bias_per_coordinate=bias_pc, rmse_per_coordinate=rmse_pc,
            failures=failures,
            true_weights=w_star_fixed if config.dgp_draws == "fixed_at_seed" else None,
        ))
    return reports


def relative_improvement(report_raw: SimReport, report_calibrated: SimReport) -> float:
    """Relative RMSE improvement of the calibrated pipeline over the raw one:
    (RMSE_raw - RMSE_calibrated) / RMSE_calibrated."""
    return (report_raw.rmse - report_calibrated.rmse) / report_calibrated.rmse


class AppointmentDGP:
    """Appointment-scheduling DGP with open-access and fixed utilization rates.

    X ~ Unif(-1, 1);  pi_1(X) = expit(0.6 + 0.1 X^3)
    Y_open  | A, X ~ Beta(1 + A/5,   max(X^2, 1e-6))
    Y_fixed | A, X ~ Beta(0.5 + A/2, max(X^2, 1e-6))

    with the two outcomes independent given (A, X). The X^2 clip keeps the Beta
    shape valid near X = 0.
    """

    SHAPE2_FLOOR = 1e-6

    @staticmethod
    def propensity(X):
        x = np.asarray(X, dtype=float).reshape(-1)
        return expit(0.6 + 0.1 * x**3)

    @classmethod
    def shape_open(cls, a):
        return 1.0 + np.asarray(a, dtype=float) / 5.0

    @classmethod
    def shape_fixed(cls, a):
        return 0.5 + np.asarray(a, dtype=float) / 2.0

    @classmethod
    def sample_outcomes(cls, x, a, rng):
        """Beta outcome draws (open, fixed) at covariate x and arm a, elementwise."""
        x = np.asarray(x, dtype=float).reshape(-1)
        shape2 = np.maximum(x**2, cls.SHAPE2_FLOOR)
        y_open = rng.beta(cls.shape_open(a), shape2)
        y_fixed = rng.beta(cls.shape_fixed(a), shape2)
        return np.column_stack([y_open, y_fixed])

    @classmethod
    def sample(cls, n, rng):
        X = rng.uniform(-1.0, 1.0, n)
        A = (rng.random(n) < cls.propensity(X)).astype(float)
        Y = cls.sample_outcomes(X, A, rng)
        return ObservationSet(Y, A, X[:, None])

    @classmethod
    def mc_moments(cls, arm, draws, rng):
        X = rng.uniform(-1.0, 1.0, draws)
        Y = cls.sample_outcomes(X, np.full(draws, float(arm)), rng)
        return Y.mean(axis=0), np.cov(Y.T, bias=True)


def gen_appointments(n: int, seed: int = 0, oracle_draws: int = 1_000_000):
    """Sampled appointment data plus {arm: TrueMoments} from the Monte Carlo oracle."""
    ss = np.random.SeedSequence(seed).spawn(3)
    data = AppointmentDGP.sample(n, np.random.default_rng(ss[0]))
    truth = {}
    for arm, child in zip((0, 1), ss[1:]):
        mean, cov = AppointmentDGP.mc_moments(arm, oracle_draws, np.random.default_rng(child))
        truth[arm] = TrueMoments(mean=mean, cov=cov)
    return data, truth
