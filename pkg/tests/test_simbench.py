import numpy as np
import pytest

from cfmv.errors import DataError
from cfmv.simbench import (AppointmentDGP, KangConfig, SimReport,
                           gen_appointments, gen_kang, relative_improvement,
                           run_sim_study, transform_covariates)


class TestKangDGP:
    def test_propensity_at_origin_is_half(self):
        _, truth = gen_kang(KangConfig(n=200, k=2, seed=0))
        assert truth.dgp.propensity(np.zeros((1, 4)))[0] == pytest.approx(0.5)

    def test_arm_contrast_equals_shift_exactly(self):
        _, truth = gen_kang(KangConfig(n=200, k=4, seed=1))
        assert np.array_equal(truth.means[1] - truth.means[0], truth.dgp.d)

    def test_closed_form_covariance_matches_monte_carlo(self):
        _, truth = gen_kang(KangConfig(n=200, k=3, seed=2))
        rng = np.random.default_rng(3)
        for arm in (0, 1):
            mc_mean, mc_cov = truth.dgp.mc_moments(arm, 1_000_000, rng)
            assert np.max(np.abs(mc_cov - truth.covs[arm])) < 0.01
            assert np.max(np.abs(mc_mean - truth.means[arm])) < 0.01

    def test_draws_deterministic_given_seed(self):
        a, _ = gen_kang(KangConfig(n=300, k=2, seed=4))
        b, _ = gen_kang(KangConfig(n=300, k=2, seed=4))
        assert np.array_equal(a.outcomes, b.outcomes)
        assert np.array_equal(a.treatment, b.treatment)

    def test_coefficients_fixed_across_data_redraws(self):
        _, t1 = gen_kang(KangConfig(n=200, k=2, seed=5))
        _, t2 = gen_kang(KangConfig(n=400, k=2, seed=5))
        assert np.array_equal(t1.dgp.b, t2.dgp.b)
        assert np.array_equal(t1.dgp.alpha, t2.dgp.alpha)


class TestTransform:
    def test_value_at_origin(self):
        row = transform_covariates(np.zeros((1, 4)))[0]
        assert np.allclose(row, [1.0, 10.0, 0.216, 400.0])

    def test_exponential_component(self):
        row = transform_covariates(np.array([[2.0, 0.0, 0.0, 0.0]]))[0]
        assert row[0] == pytest.approx(np.e)

    def test_first_component_monotone_in_x1(self):
        grid = np.linspace(-3, 3, 25)
        X = np.zeros((25, 4))
        X[:, 0] = grid
        values = transform_covariates(X)[:, 0]
        assert np.all(np.diff(values) > 0)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(DataError, match="d=4"):
            transform_covariates(np.zeros((3, 3)))


class TestRunSimStudy:
    def test_zero_noise_degenerate_dgp_drives_error_to_zero(self):
        config = KangConfig(n=400, k=2, seed=6, noise_scale=1e-3, confounding_scale=0.0)
        reports = run_sim_study(config, estimators=("doubly_robust",), calibration="pd", B=50)
        assert reports[0].bias < 1e-2 and reports[0].rmse < 1e-2

    def test_reports_satisfy_jensen_inequality(self):
        config = KangConfig(n=300, k=2, seed=7)
        for report in run_sim_study(config, B=50):
            assert np.all(report.bias_per_coordinate <= report.rmse_per_coordinate + 1e-12)
            assert report.bias <= report.rmse + 1e-12

    def test_deterministic_given_config(self):
        config = KangConfig(n=300, k=2, seed=8)
        a = run_sim_study(config, estimators=("doubly_robust",), B=50)
        b = run_sim_study(config, estimators=("doubly_robust",), B=50)
        assert a[0].bias == b[0].bias and a[0].rmse == b[0].rmse

    def test_b_floor(self):
        with pytest.raises(DataError, match="B >= 50"):
            run_sim_study(KangConfig(n=300, k=2, seed=9), B=10)


class TestRelativeImprovement:
    def _report(self, rmse):
        return SimReport("doubly_robust", 500, 100, rmse / 2, rmse,
                         np.array([rmse / 2]), np.array([rmse]), 0)

    def test_identical_reports_give_zero(self):
        assert relative_improvement(self._report(0.1), self._report(0.1)) == 0.0

    def test_formula(self):
        assert relative_improvement(self._report(0.12), self._report(0.10)) == pytest.approx(0.2)


class TestAppointments:
    def test_beta_mean_formula_at_unit_covariate(self):
        rng = np.random.default_rng(10)
        for arm in (0, 1):
            draws = AppointmentDGP.sample_outcomes(np.ones(100_000), np.full(100_000, arm), rng)
            shape1 = 1.0 + arm / 5.0
            assert draws[:, 0].mean() == pytest.approx(shape1 / (shape1 + 1.0), abs=5e-3)

    def test_outcomes_inside_unit_interval(self):
        data, _ = gen_appointments(5000, seed=11)
        assert data.outcomes.min() >= 0.0 and data.outcomes.max() <= 1.0
        assert set(np.unique(data.treatment)) <= {0.0, 1.0}

    def test_oracle_reproduces_published_utilization_table(self):
        # mean (variance) targets: A=0: open 0.79 (0.08), fixed 0.68 (0.14)
        #                          A=1: open 0.81 (0.07), fixed 0.79 (0.08)
        _, truth = gen_appointments(100, seed=12)
        targets = {
            0: ((0.79, 0.08), (0.68, 0.14)),
            1: ((0.81, 0.07), (0.79, 0.08)),
        }
        for arm, ((m_o, v_o), (m_f, v_f)) in targets.items():
            assert truth[arm].mean[0] == pytest.approx(m_o, abs=0.02)
            assert truth[arm].cov[0, 0] == pytest.approx(v_o, abs=0.02)
            assert truth[arm].mean[1] == pytest.approx(m_f, abs=0.02)
            assert truth[arm].cov[1, 1] == pytest.approx(v_f, abs=0.02)

    def test_outcomes_positively_correlated_through_covariate(self):
        _, truth = gen_appointments(100, seed=13)
        assert truth[0].cov[0, 1] > 0.0

    def test_determinism(self):
        a, _ = gen_appointments(500, seed=14)
        b, _ = gen_appointments(500, seed=14)
        assert np.array_equal(a.outcomes, b.outcomes)
