"""Covariance calibration: optimal linear shrinkage toward a scaled identity,
and positive-definite correction by eigenvalue clipping.

Norm convention: unnormalized Frobenius throughout. The shrinkage intensity
rho = beta^2 / delta^2 is invariant to the 1/k inner-product normalization, so
nothing downstream depends on the choice; delta^2 and beta^2 are reported
unnormalized.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError
from .influence import InfluenceMatrix
from .model import Calibration, CounterfactualMoments
from ._utils import symmetrize


@dataclass(frozen=True)
class ShrinkageReport:
    """Shrinkage intensities and the shrunk matrix.

    result = rho_hat * nu_hat * I + (1 - rho_hat) * raw covariance, with
    beta_sq = min(beta_tilde_sq, delta_sq) and rho_hat = beta_sq / delta_sq
    (zero when delta_sq is zero).
    """

    rho_hat: float
    nu_hat: float
    delta_sq: float
    beta_sq: float
    beta_tilde_sq: float
    result: np.ndarray


def shrink(moments: CounterfactualMoments, infl: InfluenceMatrix) -> ShrinkageReport:
    """Data-driven linear shrinkage of a doubly-robust covariance estimate.

    nu is the average diagonal entry; delta^2 the squared Frobenius distance of
    the estimate from nu*I; beta~^2 averages the squared Frobenius dispersion of
    the per-sample matrices (phi_ij(Z_t) - m_i m_j) around the estimate, which
    equals the per-entry variance of phi_second divided by n.
    """
    if moments.estimator_kind != "doubly_robust":
        raise CalibrationError(
            "calibration.shrink: shrinkage is defined for doubly_robust moments "
            f"(got {moments.estimator_kind!r})"
        )
    if moments.source_fold != infl.eval_fold:
        raise CalibrationError(
            f"calibration.shrink: influence matrix fold {infl.eval_fold!r} does not match "
            f"the moments' fold {moments.source_fold!r}"
        )
    if moments.k != infl.k:
        raise CalibrationError("calibration.shrink: dimension mismatch between moments and influence matrix")

    sigma = moments.covariance
    k = moments.k
    n = infl.n
    nu_hat = float(np.trace(sigma) / k)
    delta_sq = float(np.sum((sigma - nu_hat * np.eye(k)) ** 2))

    # sum over the full k x k matrix counts off-diagonal packed entries twice
    centered = infl.phi_second - infl.phi_second.mean(axis=0)
    weights = np.full(infl.phi_second.shape[1], 2.0)
    diag_pos = np.cumsum([0] + list(range(k, 1, -1)))
    weights[diag_pos] = 1.0
    beta_tilde_sq = float(np.sum((centered**2) @ weights) / n**2)

    beta_sq = min(beta_tilde_sq, delta_sq)
    rho_hat = beta_sq / delta_sq if delta_sq > 0 else 0.0
    result = rho_hat * nu_hat * np.eye(k) + (1.0 - rho_hat) * sigma
    return ShrinkageReport(rho_hat=rho_hat, nu_hat=nu_hat, delta_sq=delta_sq,
                           beta_sq=beta_sq, beta_tilde_sq=beta_tilde_sq, result=result)


def pd_correct(sigma, tau: float):
    """Replace a symmetric matrix by its eigenvalue-clipped version when needed.

    Returns the input unchanged (bit-exact) when its smallest eigenvalue is
    already >= tau; otherwise clips eigenvalues at tau and reassembles. Clipping
    is the Frobenius-nearest symmetric matrix with minimum eigenvalue >= tau.
    """
    sigma = np.asarray(sigma, dtype=float)
    if tau <= 0:
        raise CalibrationError(f"calibration.pd_correct: tau must be > 0, got {tau}")
    if not np.all(np.isfinite(sigma)):
        raise CalibrationError("calibration.pd_correct: eigendecomposition failure on non-finite input")
    sym = symmetrize(sigma)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals[0] >= tau:
        return sigma.copy()
    clipped = np.maximum(eigvals, tau)
    return symmetrize((eigvecs * clipped) @ eigvecs.T)


def default_tau(sigma, n: int) -> float:
    """Minimum-eigenvalue threshold decaying in n: max(1e-10, 1e-4 * trace/k * n^{-1/2}).

    The decay keeps the corrected matrix within o_P(1) of the raw estimate
    whenever the raw estimate is consistent.
    """
    sigma = np.asarray(sigma, dtype=float)
    k = sigma.shape[0]
    return float(max(1e-10, 1e-4 * np.trace(sigma) / k * n ** -0.5))


def apply_calibration(moments: CounterfactualMoments, infl, choice: str, n_for_tau=None):
    """Run the requested calibration pipeline on raw moments.

    choice is one of none / shrink / pd / shrink+pd. When both are requested,
    shrinkage runs first (it may already restore positive definiteness) and the
    PD stage only replaces the matrix when it is not PD at default_tau. Returns
    (calibrated moments, ShrinkageReport or None).
    """
    if choice not in ("none", "shrink", "pd", "shrink+pd"):
        raise CalibrationError(f"calibration: unknown calibration choice {choice!r}")
    report = None
    current = moments
    if choice in ("shrink", "shrink+pd"):
        report = shrink(moments, infl)
        current = moments.with_covariance(
            report.result, Calibration("shrunk", rho=report.rho_hat, nu=report.nu_hat)
        )
    if choice in ("pd", "shrink+pd"):
        n = n_for_tau if n_for_tau is not None else (infl.n if infl is not None else None)
        if n is None:
            raise CalibrationError("calibration: pd correction needs a sample size for default_tau")
        tau = default_tau(current.covariance, n)
        corrected = pd_correct(current.covariance, tau)
        if not np.array_equal(corrected, current.covariance):
            current = current.with_covariance(corrected, Calibration("pd_corrected", tau=tau))
    return current, report
