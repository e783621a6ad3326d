import json
from importlib import resources

import numpy as np
import pytest

import cfmv.reports as reports
from cfmv.cli import (DatasetSchema, load_csv, main, parse_lambda_grid)
from cfmv.errors import DataError
from cfmv.inference import AsymptoticCovariance, BootstrapResult
from cfmv.model import Calibration, CounterfactualMoments
from cfmv.qp import FrontierPoint
from cfmv.simbench import SimReport


def bundled(name):
    return str(resources.files("cfmv").joinpath("data", name))


APPOINTMENT_FLAGS = [
    "--data", bundled("appointments_sample.csv"),
    "--outcome-cols", "y_open,y_fixed",
    "--treatment-col", "reminder",
    "--covariate-cols", "x",
]


class TestDatasetSchema:
    def test_overlapping_columns_rejected(self):
        with pytest.raises(DataError, match="disjoint"):
            DatasetSchema(["y"], "y", ["x"])

    def test_empty_outcomes_rejected(self):
        with pytest.raises(DataError):
            DatasetSchema([], "a", ["x"])


class TestLoadCsv:
    def test_three_row_file(self, tmp_path):
        path = tmp_path / "small.csv"
        path.write_text("y1,y2,a,x\n1,2,0,0.5\n3,4,1,0.1\n5,6,true,-0.2\n")
        data = load_csv(str(path), DatasetSchema(["y1", "y2"], "a", ["x"]))
        assert (data.n, data.k, data.d) == (3, 2, 1)
        assert np.array_equal(data.treatment, [0, 1, 1])

    def test_bad_treatment_token_names_cell(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,a,x\n1,yes,0.5\n")
        with pytest.raises(DataError, match="row 0.*'a'"):
            load_csv(str(path), DatasetSchema(["y"], "a", ["x"]))

    def test_na_drop_row_reduces_n_and_logs(self, tmp_path, caplog):
        path = tmp_path / "na.csv"
        path.write_text("y,a,x\n1,0,0.5\nNA,1,0.1\n2,1,0.2\n")
        schema = DatasetSchema(["y"], "a", ["x"], na_policy="drop_row")
        with caplog.at_level("INFO", logger="cfmv"):
            data = load_csv(str(path), schema)
        assert data.n == 2
        assert any("dropped" in message for message in caplog.messages)

    def test_na_error_policy_names_cell(self, tmp_path):
        path = tmp_path / "na.csv"
        path.write_text("y,a,x\n1,0,0.5\n,1,0.1\n")
        with pytest.raises(DataError, match="row 1, column 'y'"):
            load_csv(str(path), DatasetSchema(["y"], "a", ["x"]))

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("y,a\n1,0\n")
        with pytest.raises(DataError, match="'x'"):
            load_csv(str(path), DatasetSchema(["y"], "a", ["x"]))

    def test_row_order_preserved(self, tmp_path):
        path = tmp_path / "order.csv"
        path.write_text("y,a,x\n10,0,1\n20,1,2\n30,0,3\n")
        data = load_csv(str(path), DatasetSchema(["y"], "a", ["x"]))
        assert np.array_equal(data.outcomes[:, 0], [10, 20, 30])


def test_parse_lambda_grid():
    grid = parse_lambda_grid("0:2:21")
    assert grid.size == 21 and grid[0] == 0.0 and grid[-1] == 2.0
    with pytest.raises(DataError):
        parse_lambda_grid("0-2-21")


class TestCommands:
    def test_estimate_on_bundled_appointments(self, capsys):
        code = main(["estimate", "--arm", "1", "--calibrate", "shrink+pd", "--seed", "3",
                     *APPOINTMENT_FLAGS])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["kind"] == "estimate" and report["schema_version"] == 1
        assert len(report["mean"]) == 2 and len(report["covariance"]) == 2
        assert report["diagnostics"]["n_rows"] == 2000

    def test_frontier_grid_ascending(self, capsys, tmp_path):
        csv_out = tmp_path / "frontier.csv"
        code = main(["frontier", "--lambda-grid", "0:2:21", "--seed", "1",
                     "--csv-out", str(csv_out), *APPOINTMENT_FLAGS])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        lams = [p["lambda"] for p in report["points"]]
        assert len(lams) == 21 and lams == sorted(lams)
        assert csv_out.read_text().count("\n") == 22  # header + 21 rows

    def test_bootstrap_with_asymptotic(self, capsys):
        code = main(["bootstrap", "--B", "200", "--lambda", "0.5", "--seed", "2",
                     "--asymptotic", *APPOINTMENT_FLAGS])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["kind"] == "bootstrap" and report["B"] == 200
        assert len(report["ci_lower"]) == 2
        assert report["asymptotic"] is not None or report["asymptotic_refusal"]

    def test_simulate_emits_three_reports(self, capsys):
        code = main(["simulate", "--study", "kang", "--n", "500", "--B", "50",
                     "--k", "3", "--seed", "0"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert {r["estimator"] for r in report["reports"]} == {"plugin", "ipw", "doubly_robust"}

    def test_out_flag_writes_file(self, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(["estimate", "--out", str(out), "--seed", "3", *APPOINTMENT_FLAGS])
        assert code == 0 and capsys.readouterr().out == ""
        assert json.loads(out.read_text())["kind"] == "estimate"

    def test_config_file_toml(self, tmp_path, capsys):
        config = tmp_path / "study.toml"
        config.write_text(
            f'[data]\npath = "{bundled("appointments_sample.csv")}"\n'
            'outcome_columns = ["y_open", "y_fixed"]\n'
            'treatment_column = "reminder"\ncovariate_columns = ["x"]\n'
            "[learners]\npropensity = \"logistic_with_basis\"\npropensity_degree = 3\n"
            "[program]\narm = 0\n"
        )
        assert main(["estimate", "--config", str(config), "--seed", "5"]) == 0
        assert json.loads(capsys.readouterr().out)["arm"] == 0

    def test_seed_determinism_bytes(self, capsys):
        args = ["bootstrap", "--B", "200", "--seed", "9", *APPOINTMENT_FLAGS]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        assert main(["estimate", "--arm", "7", *APPOINTMENT_FLAGS]) == 1
        assert main(["no-such-command"]) == 1

    def test_numeric_failure_is_2(self, capsys):
        code = main(["frontier", "--lambda-grid", "0:1:3", "--r-min", "5.0",
                     "--seed", "1", *APPOINTMENT_FLAGS])
        assert code == 2  # utilization means are < 1, the floor is unreachable

    def test_data_error_is_3(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,a,x\n1,yes,0.5\n")
        code = main(["estimate", "--data", str(path), "--outcome-cols", "y",
                     "--treatment-col", "a", "--covariate-cols", "x"])
        assert code == 3

    def test_portfolio_sample_ingests(self, capsys):
        code = main([
            "estimate", "--data", bundled("portfolio_returns.csv"),
            "--outcome-cols", "us_large,us_small,intl_dev,emerging,total_bond,corp_bond",
            "--treatment-col", "rate_up",
            "--covariate-cols", "cpi,unemployment,mkt_rf,smb,hml,rmw,cma",
            "--seed", "4",
        ])
        assert code == 0
        assert len(json.loads(capsys.readouterr().out)["mean"]) == 6


class TestReportRoundTrip:
    def test_estimate_round_trip(self):
        moments = CounterfactualMoments(np.array([0.1, -0.2]),
                                        np.array([[1.0, 0.3], [0.3, 2.0]]), 1,
                                        Calibration("shrunk", rho=0.25, nu=1.5),
                                        "doubly_robust")
        report = reports.moments_report(moments)
        back = reports.parse_report(reports.loads(reports.dumps(report)))
        assert np.array_equal(back.mean, moments.mean)
        assert np.array_equal(back.covariance, moments.covariance)
        assert back.calibration == moments.calibration

    def test_frontier_round_trip(self):
        points = [FrontierPoint(0.5, np.array([0.4, 0.6]), 0.123456789123456789, 1.5)]
        back = reports.parse_report(reports.loads(reports.dumps(reports.frontier_report(points))))
        assert back[0].risk_tolerance == points[0].risk_tolerance
        assert np.array_equal(back[0].weights, points[0].weights)
        assert back[0].mean == points[0].mean

    def test_bootstrap_round_trip_with_nan_rows(self):
        draws = np.array([[0.5, 0.5], [np.nan, np.nan], [0.4, 0.6]])
        result = BootstrapResult(3, draws, np.array([0.4, 0.5]), np.array([0.5, 0.6]),
                                 0.95, 1, np.array([0.45, 0.55]), False)
        asym = AsymptoticCovariance(np.eye(2) * 0.1, np.eye(3), np.eye(3) * 0.2, 150)
        blob = reports.dumps(reports.bootstrap_report(result, asym))
        back, back_asym = reports.parse_report(reports.loads(blob))
        assert np.array_equal(back.weight_draws, draws, equal_nan=True)
        assert np.array_equal(back_asym.cov_w, asym.cov_w)
        assert back.level == result.level and back.failures == 1

    def test_sim_round_trip(self):
        report = SimReport("ipw", 500, 100, 0.01, 0.05, np.array([0.01]), np.array([0.05]),
                           2, np.array([1.0]))
        back = reports.parse_report(reports.loads(reports.dumps(reports.sim_report([report]))))
        assert back[0] == SimReport("ipw", 500, 100, 0.01, 0.05, back[0].bias_per_coordinate,
                                    back[0].rmse_per_coordinate, 2, back[0].true_weights)
        assert np.array_equal(back[0].true_weights, report.true_weights)

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataError, match="unknown report kind"):
            reports.parse_report({"kind": "mystery", "schema_version": 1})
