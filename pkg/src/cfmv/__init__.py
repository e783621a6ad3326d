"""cfmv: counterfactual mean-variance optimization.

Estimates the optimal solution of the counterfactual mean-variance program from
observational data: doubly-robust moment estimation with sample splitting,
covariance calibration (linear shrinkage, PD correction), a dense active-set
QP solver with KKT diagnostics, frontier sweeps, and bootstrap/asymptotic
inference on the estimated optimal weights.
"""

from .calibration import ShrinkageReport, apply_calibration, default_tau, pd_correct, shrink
from .errors import (CalibrationError, CfmvError, CompileError, DataError,
                     InfeasibleError, InferenceError, NuisanceError,
                     SolverError, SplitError)
from .inference import (AsymptoticCovariance, BootstrapResult, ProgramTemplate,
                        asymptotic_covariance, bootstrap_weights,
                        bootstrap_weights_refit, solve_template)
from .influence import (InfluenceMatrix, estimate_moments_crossfit,
                        estimate_moments_dr, estimate_moments_ipw,
                        estimate_moments_plugin, estimate_moments_single_split,
                        phi_matrices, phi_mean_at, phi_second_at)
from .model import (Calibration, CounterfactualMoments, MVProgram,
                    ObservationSet, QPSolution, Violation, validate)
from .nuisance import (LearnerSpec, NuisanceFit, SplitPlan, fit_nuisances,
                       make_split, polynomial_basis)
from .qp import (FrontierPoint, KKTDiagnostics, OracleSolution, StandardQP,
                 brute_force_oracle, compile_program, kkt_diagnostics, solve,
                 sweep_frontier)
from .simbench import (AppointmentDGP, KangConfig, KangDGP, KangTruth,
                       OracleNuisance, SimReport, TrueMoments, gen_appointments,
                       gen_kang, relative_improvement, run_sim_study,
                       transform_covariates)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
