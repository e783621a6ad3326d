import numpy as np
import pytest

from cfmv.errors import InferenceError
from cfmv.inference import (ProgramTemplate, asymptotic_covariance,
                            bootstrap_weights, bootstrap_weights_refit,
                            solve_template)
from cfmv.influence import estimate_moments_dr, estimate_moments_single_split
from cfmv.model import (Calibration, CounterfactualMoments, MVProgram,
                        ObservationSet, QPSolution)
from cfmv.nuisance import LearnerSpec, make_split
from cfmv.qp import compile_program, solve
from cfmv.simbench import KangConfig, OracleNuisance, gen_kang
from cfmv._utils import packed_index_pairs

SPEC = LearnerSpec(regression_learner="ridge_with_basis", regression_degree=2,
                   regression_penalty=1e-6)


def gaussian_oracle_data(Sigma, n, rng, mean=None):
    """Fully-treated draws with exact nuisances: phi_i = Y_i, phi_ij = Y_i Y_j."""
    k = Sigma.shape[0]
    mean = np.zeros(k) if mean is None else mean
    L = np.linalg.cholesky(Sigma)
    Y = rng.standard_normal((n, k)) @ L.T + mean
    data = ObservationSet(Y, np.ones(n), np.zeros((n, 1)))
    pairs = packed_index_pairs(k)
    second = np.array([Sigma[i, j] + mean[i] * mean[j] for i, j in pairs])
    fit = OracleNuisance(
        k=k,
        propensity_fn=lambda X: np.full(X.shape[0], 1.0 - 1e-9),
        mean_fn=lambda X, a: np.broadcast_to(mean, (X.shape[0], k)).copy(),
        second_fn=lambda X, a: np.broadcast_to(second, (X.shape[0], len(pairs))).copy(),
        clip_epsilon=1e-9,
    )
    return data, fit


class TestBootstrap:
    def test_degenerate_data_zero_width_intervals(self):
        row = np.array([0.4, 0.7])
        data = ObservationSet(np.tile(row, (60, 1)), np.ones(60), np.zeros((60, 1)))
        pairs = packed_index_pairs(2)
        fit = OracleNuisance(
            k=2,
            propensity_fn=lambda X: np.full(X.shape[0], 0.9),
            mean_fn=lambda X, a: np.tile(row, (X.shape[0], 1)),
            second_fn=lambda X, a: np.tile([row[i] * row[j] for i, j in pairs], (X.shape[0], 1)),
        )
        template = ProgramTemplate(arm=1, risk_tolerance=0.0, calibration="pd")
        result = bootstrap_weights(data, fit, template, B=200, seed=0)
        assert result.failures == 0
        assert np.allclose(result.ci_lower, result.ci_upper, atol=1e-12)

    def test_deterministic_given_seed(self):
        data, truth = gen_kang(KangConfig(n=600, k=2, seed=1))
        plan = make_split(600, "single_split", 0)
        moments, infl, fit = estimate_moments_single_split(data, SPEC, 1, plan=plan)
        template = ProgramTemplate(arm=1, risk_tolerance=1.0)
        a = bootstrap_weights(data, fit, template, B=200, seed=5, eval_indices=plan.fold_indices(1))
        b = bootstrap_weights(data, fit, template, B=200, seed=5, eval_indices=plan.fold_indices(1))
        assert np.array_equal(a.weight_draws, b.weight_draws, equal_nan=True)

    def test_b_floor_enforced(self):
        data, truth = gen_kang(KangConfig(n=600, k=2, seed=1))
        with pytest.raises(InferenceError, match="B must be >= 200"):
            bootstrap_weights(data, truth.dgp.oracle_nuisance(),
                              ProgramTemplate(arm=1), B=100)

    def test_level_range_enforced(self):
        data, truth = gen_kang(KangConfig(n=600, k=2, seed=1))
        with pytest.raises(InferenceError, match="level"):
            bootstrap_weights(data, truth.dgp.oracle_nuisance(),
                              ProgramTemplate(arm=1), B=200, level=1.5)

    def test_infeasible_resamples_flag_unreliable(self):
        # weighted-mean floor sits ~0.4 SE above the estimated max mean, so a
        # large share of resamples is infeasible
        rng = np.random.default_rng(3)
        Sigma = np.diag([1.0, 1.0])
        data, fit = gaussian_oracle_data(Sigma, 80, rng, mean=np.array([0.5, 0.0]))
        moments, _ = estimate_moments_dr(data, fit, 1)
        floor = float(moments.mean[0]) - 0.002
        template = ProgramTemplate(arm=1, risk_tolerance=0.0, min_return=floor,
                                   calibration="none")
        with pytest.warns(UserWarning, match="outside the percentile interval"):
            # surviving resamples are the upward-skewed ones, so the containment
            # check warns (never fails) as well
            result = bootstrap_weights(data, fit, template, B=200, seed=4)
        assert result.failures > 10
        assert not result.reliable

    def test_refit_variant_smoke(self):
        data, _ = gen_kang(KangConfig(n=400, k=2, seed=5))
        template = ProgramTemplate(arm=1, risk_tolerance=1.0)
        result = bootstrap_weights_refit(data, SPEC, template, B=200, seed=6)
        assert result.B == 200 and result.failures <= 10
        assert np.all(result.ci_upper >= result.ci_lower)


class TestAsymptoticCovariance:
    def test_refuses_without_strict_complementarity(self):
        moments = CounterfactualMoments(np.zeros(2), np.eye(2), 1,
                                        estimator_kind="doubly_robust")
        program = MVProgram(moments, risk_tolerance=0.0)
        fake = QPSolution(np.array([0.5, 0.5]), np.zeros(2), np.zeros(1), (0,),
                          0.0, True, False, 0.0)
        with pytest.raises(InferenceError, match="strict complementarity"):
            asymptotic_covariance(None, moments, fake, program)

    def test_refuses_without_licq(self):
        moments = CounterfactualMoments(np.zeros(2), np.eye(2), 1,
                                        estimator_kind="doubly_robust")
        program = MVProgram(moments, risk_tolerance=0.0)
        fake = QPSolution(np.array([0.5, 0.5]), np.zeros(2), np.zeros(1), (),
                          0.0, False, True, 0.0)
        with pytest.raises(InferenceError, match="LICQ"):
            asymptotic_covariance(None, moments, fake, program)

    def test_refuses_plugin_moments(self):
        moments = CounterfactualMoments(np.zeros(2), np.eye(2), 1, estimator_kind="plugin")
        program = MVProgram(moments, risk_tolerance=0.0)
        fake = QPSolution(np.array([0.5, 0.5]), np.zeros(2), np.zeros(1), (),
                          0.0, True, True, 0.0)
        with pytest.raises(InferenceError, match="doubly_robust"):
            asymptotic_covariance(None, moments, fake, program)

    def test_interior_case_matches_analytic_and_monte_carlo(self):
        # Interior minimum-variance point with only the budget equality active.
        # Analytic oracle (Gaussian fourth moments): avar = (w*'Sw*) M S M'
        # with M the reduced KKT inverse. MC oracle: 10^4 reps of the
        # closed-form equality-constrained solution at n = 200.
        Sigma = np.array([[1.0, 0.3, 0.1], [0.3, 1.5, 0.2], [0.1, 0.2, 2.0]])
        k = 3
        Si = np.linalg.inv(Sigma)
        one = np.ones(k)
        scale = one @ Si @ one
        w_star = Si @ one / scale
        M = Si - np.outer(Si @ one, Si @ one) / scale
        avar_analytic = (w_star @ Sigma @ w_star) * (M @ Sigma @ M.T)

        rng = np.random.default_rng(42)
        reps, n = 10_000, 200
        L = np.linalg.cholesky(Sigma)
        Y = rng.standard_normal((reps, n, k)) @ L.T
        means = Y.mean(axis=1)
        covs = np.einsum("rni,rnj->rij", Y, Y) / n - np.einsum("ri,rj->rij", means, means)
        raw = np.linalg.solve(covs, np.broadcast_to(one, (reps, k))[:, :, None])[:, :, 0]
        w_hat = raw / raw.sum(axis=1, keepdims=True)
        assert (w_hat > 0).all()  # bounds never active, the closed form applies
        dev = np.sqrt(n) * (w_hat - w_star)
        avar_mc = dev.T @ dev / reps
        assert np.max(np.abs(avar_mc - avar_analytic) / np.abs(avar_analytic)) < 0.15

        data, fit = gaussian_oracle_data(Sigma, 100_000, rng)
        moments, infl = estimate_moments_dr(data, fit, 1)
        sol, _, program = solve_template(moments, infl,
                                         ProgramTemplate(arm=1, risk_tolerance=0.0,
                                                         calibration="none"))
        ac = asymptotic_covariance(infl, moments, sol, program)
        assert np.max(np.abs(ac.cov_w - avar_analytic) / np.abs(avar_analytic)) < 0.15

    def test_zero_noise_limit_degenerates_to_zero(self):
        config = KangConfig(n=400, k=3, seed=7, noise_scale=1e-4, confounding_scale=0.0)
        data, truth = gen_kang(config)
        moments, infl = estimate_moments_dr(data, truth.dgp.oracle_nuisance(), 1)
        sol, _, program = solve_template(moments, infl,
                                         ProgramTemplate(arm=1, risk_tolerance=1.0,
                                                         calibration="pd"))
        ac = asymptotic_covariance(infl, moments, sol, program)
        assert np.max(np.abs(ac.upsilon_cov)) < 1e-4
        assert np.max(np.abs(ac.cov_w)) < 1e-4

    def test_cov_w_is_symmetric_psd(self):
        data, truth = gen_kang(KangConfig(n=1500, k=3, seed=8))
        plan = make_split(1500, "single_split", 1)
        moments, infl, fit = estimate_moments_single_split(data, SPEC, 1, plan=plan)
        sol, _, program = solve_template(moments, infl,
                                         ProgramTemplate(arm=1, risk_tolerance=1.0))
        ac = asymptotic_covariance(infl, moments, sol, program)
        assert np.allclose(ac.cov_w, ac.cov_w.T, atol=1e-12)
        assert np.linalg.eigvalsh(ac.cov_w)[0] >= -1e-10

    def test_invariance_under_constraint_row_rescaling(self):
        # the same feasible set expressed with rescaled bound rows must give
        # the same cov_w (KKT-system scaling invariance)
        Sigma = np.array([[1.0, 0.2], [0.2, 1.0]])
        rng = np.random.default_rng(9)
        data, fit = gaussian_oracle_data(Sigma, 5000, rng, mean=np.array([1.0, 0.0]))
        moments, infl = estimate_moments_dr(data, fit, 1)

        covs = []
        for scale in (1.0, 7.5):
            template = ProgramTemplate(
                arm=1, risk_tolerance=5.0, include_simplex=False, calibration="none",
                extra_ineq=(scale * -np.eye(2), np.zeros(2)),
                extra_eq=(np.ones((1, 2)), np.array([1.0])),
            )
            sol, _, program = solve_template(moments, infl, template)
            assert sol.sc_ok and sol.licq_ok and len(sol.active_set) == 1
            ac = asymptotic_covariance(infl, moments, sol, program)
            covs.append(ac.cov_w)
        assert np.allclose(covs[0], covs[1], rtol=1e-8, atol=1e-12)

    def test_active_return_constraint_block_validated_by_bootstrap(self):
        # when the weighted-mean floor binds, the estimated constraint row enters
        # Upsilon; agreement with the bootstrap checks the block's sign and scale
        Sigma = np.array([[1.0, 0.15], [0.15, 0.8]])
        mean = np.array([0.6, 0.1])
        rng = np.random.default_rng(10)
        data, fit = gaussian_oracle_data(Sigma, 4000, rng, mean=mean)
        moments, infl = estimate_moments_dr(data, fit, 1)
        floor = 0.45  # forces w'm = 0.45 with both weights strictly positive
        template = ProgramTemplate(arm=1, risk_tolerance=0.0, min_return=floor,
                                   calibration="none")
        sol, _, program = solve_template(moments, infl, template)
        qp = compile_program(program)
        assert any(qp.ineq_kinds[j] == "min_return" for j in sol.active_set)
        assert sol.sc_ok and sol.licq_ok
        ac = asymptotic_covariance(infl, moments, sol, program)
        boot = bootstrap_weights(data, fit, template, B=800, seed=11)
        boot_var = np.nanvar(boot.weight_draws, axis=0)
        plug_var = np.diag(ac.cov_w) / ac.n_eval
        assert np.all(np.abs(plug_var - boot_var) / boot_var < 0.3)


def test_solve_template_returns_calibrated_program():
    data, truth = gen_kang(KangConfig(n=800, k=2, seed=12))
    plan = make_split(800, "single_split", 2)
    moments, infl, _ = estimate_moments_single_split(data, SPEC, 1, plan=plan)
    sol, calibrated, program = solve_template(moments, infl,
                                              ProgramTemplate(arm=1, risk_tolerance=1.0))
    assert program.moments is calibrated
    assert np.linalg.eigvalsh(calibrated.covariance)[0] > 0
    assert sol.kkt_residual <= 1e-8
