"""JSON report schemas (versioned) and their CSV mirrors.

Every report dict carries schema_version and kind; parse_report inverts
emit exactly for finite doubles (json round-trips Python floats bit-exactly).
"""

import csv
import json

import numpy as np

from .calibration import ShrinkageReport
from .errors import DataError
from .inference import AsymptoticCovariance, BootstrapResult
from .model import Calibration, CounterfactualMoments
from .qp import FrontierPoint
from .simbench import SimReport

SCHEMA_VERSION = 1


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def _calibration_dict(cal: Calibration):
    return {"kind": cal.kind, "rho": cal.rho, "nu": cal.nu, "tau": cal.tau}


def _calibration_from(d):
    return Calibration(kind=d["kind"], rho=d["rho"], nu=d["nu"], tau=d["tau"])


def moments_report(moments: CounterfactualMoments, raw_covariance=None,
                   shrinkage: ShrinkageReport = None, diagnostics=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "estimate",
        "arm": moments.arm,
        "estimator_kind": moments.estimator_kind,
        "mean": _arr(moments.mean),
        "covariance": _arr(moments.covariance),
        "covariance_raw": _arr(raw_covariance) if raw_covariance is not None else None,
        "calibration": _calibration_dict(moments.calibration),
        "shrinkage": None if shrinkage is None else {
            "rho_hat": shrinkage.rho_hat,
            "nu_hat": shrinkage.nu_hat,
            "delta_sq": shrinkage.delta_sq,
            "beta_sq": shrinkage.beta_sq,
            "beta_tilde_sq": shrinkage.beta_tilde_sq,
        },
        "diagnostics": diagnostics,
    }


def _moments_from(d):
    return CounterfactualMoments(
        mean=np.array(d["mean"]),
        covariance=np.array(d["covariance"]),
        arm=d["arm"],
        calibration=_calibration_from(d["calibration"]),
        estimator_kind=d["estimator_kind"],
    )


def frontier_report(points, arm=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "frontier",
        "arm": arm,
        "points": [
            {"lambda": p.risk_tolerance, "weights": _arr(p.weights),
             "mean": p.mean, "variance": p.variance}
            for p in points
        ],
    }


def _frontier_from(d):
    return [
        FrontierPoint(risk_tolerance=p["lambda"], weights=np.array(p["weights"]),
                      mean=p["mean"], variance=p["variance"])
        for p in d["points"]
    ]


def bootstrap_report(result: BootstrapResult, asymptotic: AsymptoticCovariance = None,
                     asymptotic_refusal: str = None):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "bootstrap",
        "B": result.B,
        "level": result.level,
        "failures": result.failures,
        "reliable": result.reliable,
        "point_estimate": _arr(result.point_estimate),
        "ci_lower": _arr(result.ci_lower),
        "ci_upper": _arr(result.ci_upper),
        "weight_draws": [[None if np.isnan(v) else v for v in row] for row in result.weight_draws],
        "asymptotic": None if asymptotic is None else {
            "cov_w": _arr(asymptotic.cov_w),
            "kkt_matrix": _arr(asymptotic.kkt_matrix),
            "upsilon_cov": _arr(asymptotic.upsilon_cov),
            "n_eval": asymptotic.n_eval,
            "note": "cov_w eigenvalues clipped at 0 (PSD projection)",
        },
        "asymptotic_refusal": asymptotic_refusal,
    }


def _bootstrap_from(d):
    draws = np.array([[np.nan if v is None else v for v in row] for row in d["weight_draws"]],
                     dtype=float).reshape(d["B"], -1)
    result = BootstrapResult(
        B=d["B"],
        weight_draws=draws,
        ci_lower=np.array(d["ci_lower"]),
        ci_upper=np.array(d["ci_upper"]),
        level=d["level"],
        failures=d["failures"],
        point_estimate=np.array(d["point_estimate"]),
        reliable=d["reliable"],
    )
    asym = None
    if d.get("asymptotic") is not None:
        a = d["asymptotic"]
        asym = AsymptoticCovariance(
            cov_w=np.array(a["cov_w"]),
            kkt_matrix=np.array(a["kkt_matrix"]),
            upsilon_cov=np.array(a["upsilon_cov"]),
            n_eval=a["n_eval"],
        )
    return result, asym


def sim_report(reports):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "simulate",
        "reports": [
            {
                "estimator": r.estimator, "n": r.n, "B": r.B,
                "bias": r.bias, "rmse": r.rmse,
                "bias_per_coordinate": _arr(r.bias_per_coordinate),
                "rmse_per_coordinate": _arr(r.rmse_per_coordinate),
                "failures": r.failures,
                "true_weights": None if r.true_weights is None else _arr(r.true_weights),
            }
            for r in reports
        ],
    }


def _sim_from(d):
    return [
        SimReport(
            estimator=r["estimator"], n=r["n"], B=r["B"], bias=r["bias"], rmse=r["rmse"],
            bias_per_coordinate=np.array(r["bias_per_coordinate"]),
            rmse_per_coordinate=np.array(r["rmse_per_coordinate"]),
            failures=r["failures"],
            true_weights=None if r["true_weights"] is None else np.array(r["true_weights"]),
        )
        for r in d["reports"]
    ]


_PARSERS = {
    "estimate": _moments_from,
    "frontier": _frontier_from,
    "bootstrap": _bootstrap_from,
    "simulate": _sim_from,
}


def parse_report(d):
    """Inverse of the emit functions; dispatches on the report kind."""
    kind = d.get("kind")
    if kind not in _PARSERS:
        raise DataError(f"reports: unknown report kind {kind!r}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"reports: unsupported schema_version {d.get('schema_version')!r}")
    return _PARSERS[kind](d)


def dumps(report):
    return json.dumps(report, indent=2, allow_nan=False)


def loads(text):
    return json.loads(text)


def write_frontier_csv(points, path):
    k = len(points[0].weights) if points else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "mean", "variance"] + [f"w_{i}" for i in range(k)])
        for p in points:
            writer.writerow([p.risk_tolerance, p.mean, p.variance] + list(p.weights))


def write_sim_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "n", "B", "bias", "rmse", "failures"])
        for r in reports:
            writer.writerow([r.estimator, r.n, r.B, r.bias, r.rmse, r.failures])
