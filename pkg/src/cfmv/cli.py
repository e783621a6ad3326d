"""Command-line surface: data ingestion, configuration, and report emission.

Subcommands: estimate, frontier, bootstrap, simulate. Reports are JSON on
stdout or at --out; simulate/frontier optionally mirror tabular results to CSV.
Exit codes: 0 success, 1 usage error, 2 numeric failure (infeasible program,
iteration cap, calibration/inference refusal), 3 data error.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from typing import List

import numpy as np

from .calibration import apply_calibration
from .errors import (CalibrationError, CfmvError, CompileError, DataError,
                     InfeasibleError, InferenceError, NuisanceError,
                     SolverError, SplitError)
from .inference import ProgramTemplate, asymptotic_covariance, bootstrap_weights, solve_template
from .influence import estimate_moments_crossfit, estimate_moments_single_split
from .model import MVProgram, ObservationSet, check_observations
from .nuisance import LearnerSpec, make_split
from .qp import compile_program, solve, sweep_frontier
from .simbench import KangConfig, run_sim_study
from . import reports

log = logging.getLogger("cfmv")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_DATA = 3

_NA_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass(frozen=True)
class DatasetSchema:
    """Column mapping for CSV ingestion; the three column sets must be disjoint."""

    outcome_columns: List[str]
    treatment_column: str
    covariate_columns: List[str]
    na_policy: str = "error"

    def __post_init__(self):
        if not self.outcome_columns or not self.covariate_columns or not self.treatment_column:
            raise DataError("cli: schema needs at least one outcome, one covariate, and a treatment column")
        groups = [set(self.outcome_columns), {self.treatment_column}, set(self.covariate_columns)]
        if len(set().union(*groups)) != sum(len(g) for g in groups):
            raise DataError("cli: outcome, treatment, and covariate column sets must be disjoint")
        if self.na_policy not in ("error", "drop_row"):
            raise DataError(f"cli: na_policy must be 'error' or 'drop_row', got {self.na_policy!r}")


def _parse_treatment(token, row, column):
    text = token.strip().lower()
    if text in ("1", "true"):
        return 1.0
    if text in ("0", "false"):
        return 0.0
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"cli.load_csv: treatment cell {token!r} at row {row}, "
                        f"column {column!r} is not one of 0/1/true/false") from None
    if value in (0.0, 1.0):
        return value
    raise DataError(f"cli.load_csv: treatment cell {token!r} at row {row}, "
                    f"column {column!r} is not one of 0/1/true/false")


def load_csv(path, schema: DatasetSchema) -> ObservationSet:
    """Read an RFC-4180 CSV with a header row into an ObservationSet.

    Row order is preserved. Under na_policy='drop_row', rows with
    missing/unparseable numeric cells are dropped and logged; under 'error'
    they raise with the (row, column) location.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"cli.load_csv: {path} is empty (no header row)") from None
        rows = list(reader)

    positions = {}
    for name in schema.outcome_columns + [schema.treatment_column] + schema.covariate_columns:
        if name not in header:
            raise DataError(f"cli.load_csv: missing column {name!r} in {path}")
        positions[name] = header.index(name)

    outcomes, treatment, covariates = [], [], []
    dropped = 0
    for r, row in enumerate(rows):
        y_vals, x_vals = [], []
        bad_cell = None
        for name in schema.outcome_columns + schema.covariate_columns:
            token = row[positions[name]] if positions[name] < len(row) else ""
            text = token.strip().lower()
            if text in _NA_TOKENS:
                bad_cell = (r, name, token)
                break
            try:
                value = float(token)
            except ValueError:
                bad_cell = (r, name, token)
                break
            (y_vals if name in schema.outcome_columns else x_vals).append(value)
        if bad_cell is not None:
            if schema.na_policy == "drop_row":
                dropped += 1
                log.info("cli.load_csv: dropped row %d (cell %r in column %r)",
                         bad_cell[0], bad_cell[2], bad_cell[1])
                continue
            raise DataError(f"cli.load_csv: non-numeric cell {bad_cell[2]!r} at "
                            f"row {bad_cell[0]}, column {bad_cell[1]!r}")
        a_token = row[positions[schema.treatment_column]] if positions[schema.treatment_column] < len(row) else ""
        treatment.append(_parse_treatment(a_token, r, schema.treatment_column))
        outcomes.append(y_vals)
        covariates.append(x_vals)

    if dropped:
        log.info("cli.load_csv: dropped %d rows under na_policy=drop_row", dropped)
    if not outcomes:
        raise DataError(f"cli.load_csv: no usable rows in {path}")
    return ObservationSet(np.array(outcomes), np.array(treatment), np.array(covariates))


def parse_lambda_grid(text):
    """start:end:count with inclusive endpoints, e.g. 0:2:21."""
    parts = text.split(":")
    if len(parts) != 3:
        raise DataError(f"cli: lambda grid {text!r} must look like start:end:count")
    try:
        start, end, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise DataError(f"cli: lambda grid {text!r} must look like start:end:count") from None
    if count < 1:
        raise DataError("cli: lambda grid needs count >= 1")
    return np.linspace(start, end, count)


def _load_config(path):
    if path is None:
        return {}
    text = open(path, "rb").read()
    if path.endswith(".json"):
        return json.loads(text.decode("utf-8"))
    try:
        import tomllib as toml
    except ImportError:  # Python < 3.11
        import tomli as toml
    return toml.loads(text.decode("utf-8"))


def _cfg(config, section, key, default=None):
    return config.get(section, {}).get(key, default)


def _schema_from(config, args):
    outcome = getattr(args, "outcome_cols", None) or _cfg(config, "data", "outcome_columns")
    treatment = getattr(args, "treatment_col", None) or _cfg(config, "data", "treatment_column")
    covariate = getattr(args, "covariate_cols", None) or _cfg(config, "data", "covariate_columns")
    if isinstance(outcome, str):
        outcome = [c.strip() for c in outcome.split(",") if c.strip()]
    if isinstance(covariate, str):
        covariate = [c.strip() for c in covariate.split(",") if c.strip()]
    if outcome is None or treatment is None or covariate is None:
        raise DataError("cli: dataset schema incomplete; provide outcome/treatment/covariate "
                        "columns via flags or the [data] config section")
    na_policy = getattr(args, "na_policy", None) or _cfg(config, "data", "na_policy", "error")
    return DatasetSchema(outcome, treatment, covariate, na_policy)


def _learners_from(config):
    section = config.get("learners", {})
    return LearnerSpec(
        propensity_learner=section.get("propensity", "logistic_irls"),
        propensity_degree=int(section.get("propensity_degree", 1)),
        regression_learner=section.get("regression", "ridge_with_basis"),
        regression_degree=int(section.get("regression_degree", 2)),
        regression_penalty=float(section.get("regression_penalty", 1e-6)),
        kernel_bandwidth=float(section.get("kernel_bandwidth", 1.0)),
        clip_epsilon=float(section.get("clip_epsilon", 0.01)),
    )


def _min_return_from(value):
    if value is None:
        return -np.inf
    if isinstance(value, str):
        if value.strip().lower() in ("-inf", "-infinity"):
            return -np.inf
        return float(value)
    return float(value)


def _estimate_pipeline(config, args):
    """Shared front half: CSV -> split -> fit -> moments (+ influence, fit)."""
    data_path = getattr(args, "data", None) or _cfg(config, "data", "path")
    if data_path is None:
        raise DataError("cli: no dataset given; pass --data or set [data].path in the config")
    schema = _schema_from(config, args)
    data = load_csv(data_path, schema)
    check_observations(data, where="cli")

    spec = _learners_from(config)
    seed = args.seed if args.seed is not None else int(_cfg(config, "split", "seed", 0))
    mode = _cfg(config, "split", "mode", "single_split")
    kind = getattr(args, "kind", None) or _cfg(config, "program", "estimator", "doubly_robust")
    arm = args.arm if args.arm is not None else int(_cfg(config, "program", "arm", 1))

    if mode == "crossfit":
        plan = make_split(data.n, "crossfit", seed, int(_cfg(config, "split", "folds", 5)))
        moments, infl = estimate_moments_crossfit(data, spec, plan, arm, kind)
        return data, moments, infl, None, plan, arm, seed
    plan = make_split(data.n, "single_split", seed)
    moments, infl, fit = estimate_moments_single_split(data, spec, arm, kind, plan=plan)
    return data, moments, infl, fit, plan, arm, seed


def _calibrate_choice(args, config):
    return getattr(args, "calibrate", None) or _cfg(config, "program", "calibrate", "shrink+pd")


def _emit(report, args):
    text = reports.dumps(report)
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def cmd_estimate(args):
    config = _load_config(args.config)
    data, moments, infl, fit, plan, arm, _ = _estimate_pipeline(config, args)
    choice = _calibrate_choice(args, config)
    n_eval = infl.n if infl is not None else data.n - len(plan.fold_indices(0))
    calibrated, shrink_rep = apply_calibration(moments, infl, choice, n_for_tau=n_eval)
    diagnostics = {
        "n_rows": data.n,
        "k": data.k,
        "eval_fold_size": n_eval,
        "split_mode": plan.mode,
    }
    if fit is not None:
        probe = fit.predict_propensity(data.covariates, arm)
        diagnostics["propensity_range"] = [float(probe.min()), float(probe.max())]
        diagnostics["clip_epsilon"] = fit.spec.clip_epsilon
    _emit(reports.moments_report(calibrated, raw_covariance=moments.covariance,
                                 shrinkage=shrink_rep, diagnostics=diagnostics), args)
    return EXIT_OK


def cmd_frontier(args):
    config = _load_config(args.config)
    data, moments, infl, _, plan, arm, _ = _estimate_pipeline(config, args)
    choice = _calibrate_choice(args, config)
    n_eval = infl.n if infl is not None else data.n - len(plan.fold_indices(0))
    calibrated, _ = apply_calibration(moments, infl, choice, n_for_tau=n_eval)
    grid_text = args.lambda_grid or _cfg(config, "program", "lambda_grid", "0:2:21")
    grid = parse_lambda_grid(grid_text)
    min_return = _min_return_from(args.r_min if args.r_min is not None
                                  else _cfg(config, "program", "min_return"))
    points = sweep_frontier(calibrated, grid, min_return=min_return)
    if args.csv_out:
        reports.write_frontier_csv(points, args.csv_out)
    _emit(reports.frontier_report(points, arm=arm), args)
    return EXIT_OK


def cmd_bootstrap(args):
    config = _load_config(args.config)
    data, moments, infl, fit, plan, arm, seed = _estimate_pipeline(config, args)
    if fit is None:
        raise DataError("cli.bootstrap: bootstrap requires split.mode=single_split "
                        "(fixed nuisances need one evaluation fold)")
    template = ProgramTemplate(
        arm=arm,
        risk_tolerance=args.risk_tolerance if args.risk_tolerance is not None
        else float(_cfg(config, "program", "risk_tolerance", 0.0)),
        min_return=_min_return_from(args.r_min if args.r_min is not None
                                    else _cfg(config, "program", "min_return")),
        calibration=_calibrate_choice(args, config),
    )
    B = args.B if args.B is not None else int(_cfg(config, "bootstrap", "B", 500))
    level = args.level if args.level is not None else float(_cfg(config, "bootstrap", "level", 0.95))
    result = bootstrap_weights(data, fit, template, B=B, level=level, seed=seed,
                               eval_indices=plan.fold_indices(1))
    asym = refusal = None
    want_asym = args.asymptotic or bool(_cfg(config, "bootstrap", "asymptotic", False))
    if want_asym:
        try:
            sol, _, program = solve_template(moments, infl, template)
            asym = asymptotic_covariance(infl, moments, sol, program)
        except (InferenceError, CfmvError) as exc:
            refusal = str(exc)
    _emit(reports.bootstrap_report(result, asymptotic=asym, asymptotic_refusal=refusal), args)
    return EXIT_OK


def cmd_simulate(args):
    config = _load_config(args.config)
    study = args.study or _cfg(config, "simulate", "study", "kang")
    if study != "kang":
        raise DataError(f"cli.simulate: unknown study {study!r}; the Monte Carlo study "
                        "runner covers the multivariate Gaussian benchmark ('kang')")
    seed = args.seed if args.seed is not None else int(_cfg(config, "simulate", "seed", 0))
    kang = KangConfig(
        n=args.n or int(_cfg(config, "simulate", "n", 500)),
        k=args.k or int(_cfg(config, "simulate", "k", 3)),
        seed=seed,
        use_transformed="randomize_per_rep" if (args.transformed or
                                                _cfg(config, "simulate", "transformed", False))
        else "never",
        risk_tolerance=float(_cfg(config, "simulate", "risk_tolerance", 1.0)),
    )
    estimators = tuple((args.estimators or _cfg(config, "simulate", "estimators",
                                                "plugin,ipw,doubly_robust")).split(","))
    B = args.B if args.B is not None else int(_cfg(config, "simulate", "B", 100))
    results = run_sim_study(kang, estimators=estimators,
                            calibration=_calibrate_choice(args, config), B=B)
    if args.csv_out:
        reports.write_sim_csv(results, args.csv_out)
    _emit(reports.sim_report(results), args)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"cfmv: usage error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--data", help="CSV dataset path (overrides config)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--arm", type=int, choices=(0, 1), default=None)
    p.add_argument("--calibrate", choices=("none", "shrink", "pd", "shrink+pd"), default=None)
    p.add_argument("--kind", choices=("plugin", "ipw", "doubly_robust"), default=None,
                   help="moment estimator (default doubly_robust)")
    p.add_argument("--outcome-cols", dest="outcome_cols", help="comma-separated outcome columns")
    p.add_argument("--treatment-col", dest="treatment_col")
    p.add_argument("--covariate-cols", dest="covariate_cols", help="comma-separated covariate columns")
    p.add_argument("--na-policy", dest="na_policy", choices=("error", "drop_row"), default=None)


def build_parser():
    parser = _Parser(prog="cfmv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="counterfactual mean/covariance estimates")
    _add_common(p_est)
    p_est.set_defaults(func=cmd_estimate)

    p_fr = sub.add_parser("frontier", help="sweep the mean-variance frontier over a lambda grid")
    _add_common(p_fr)
    p_fr.add_argument("--lambda-grid", dest="lambda_grid", help="start:end:count, inclusive")
    p_fr.add_argument("--r-min", dest="r_min", default=None, help="weighted-mean floor (or -inf)")
    p_fr.add_argument("--csv-out", dest="csv_out", help="also mirror the frontier as CSV")
    p_fr.set_defaults(func=cmd_frontier)

    p_bs = sub.add_parser("bootstrap", help="percentile bootstrap CIs for the optimal weights")
    _add_common(p_bs)
    p_bs.add_argument("--B", type=int, default=None)
    p_bs.add_argument("--level", type=float, default=None)
    p_bs.add_argument("--lambda", dest="risk_tolerance", type=float, default=None)
    p_bs.add_argument("--r-min", dest="r_min", default=None)
    p_bs.add_argument("--asymptotic", action="store_true",
                      help="also report the plug-in asymptotic covariance")
    p_bs.set_defaults(func=cmd_bootstrap)

    p_sim = sub.add_parser("simulate", help="Monte Carlo study of the three estimators")
    _add_common(p_sim)
    p_sim.add_argument("--study", choices=("kang",), default=None)
    p_sim.add_argument("--n", type=int, default=None)
    p_sim.add_argument("--B", type=int, default=None)
    p_sim.add_argument("--k", type=int, default=None)
    p_sim.add_argument("--transformed", action="store_true",
                       help="misspecify one nuisance model per replication")
    p_sim.add_argument("--estimators", default=None, help="comma-separated subset of plugin,ipw,doubly_robust")
    p_sim.add_argument("--csv-out", dest="csv_out", help="also mirror the reports as CSV")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    except (InfeasibleError, SolverError, CompileError, CalibrationError, InferenceError) as exc:
        sys.stderr.write(f"cfmv: numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except (DataError, NuisanceError, SplitError) as exc:
        sys.stderr.write(f"cfmv: data error: {exc}\n")
        return EXIT_DATA
    except CfmvError as exc:
        sys.stderr.write(f"cfmv: error: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
