"""Dense convex QP machinery for the mean-variance program.

Programs are lowered to the standard form

    minimize (1/2) w'Qw + c'w   subject to   A_ineq w <= b_ineq,  A_eq w = b_eq,

and solved by a primal active-set method built on dense KKT solves: start from
a feasible vertex (phase-1 linear feasibility), iterate equality-constrained
subproblems, add the blocking constraint / drop the most-negative dual, break
ties by lowest constraint index. Exact active sets and duals come out of the
method directly, which the sensitivity-based inference downstream relies on.
"""

import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import linprog

from .errors import CompileError, DataError, InfeasibleError, SolverError
from .model import CounterfactualMoments, MVProgram, QPSolution

FEASIBILITY_TOL = 1e-8
STATIONARITY_TOL = 1e-8
MAX_ITER = 1000


@dataclass(frozen=True)
class StandardQP:
    """Compiled quadratic program. Row kinds tag the provenance of each constraint
    ("bound", "min_return", "extra" / "budget", "extra_eq") for diagnostics and
    for the inference module, which must know which rows carry estimated
    coefficients."""

    Q: np.ndarray
    c: np.ndarray
    A_ineq: np.ndarray
    b_ineq: np.ndarray
    ineq_kinds: Tuple[str, ...]
    A_eq: np.ndarray
    b_eq: np.ndarray
    eq_kinds: Tuple[str, ...]
    simplex: bool

    @property
    def k(self):
        return self.Q.shape[0]


def compile_program(program: MVProgram) -> StandardQP:
    """Lower an MVProgram to standard form and probe feasibility.

    The simplex expands to one equality (w'1 = 1) and k bounds (-w <= 0); a
    finite min_return becomes -m'w <= -min_return. Q must already be positive
    definite: calibrate first.
    """
    moments = program.moments
    k = moments.k
    Q = np.array(moments.covariance, dtype=float)
    min_eig = float(np.linalg.eigvalsh(Q)[0])
    if min_eig <= 0:
        raise CompileError(
            f"qp.compile: covariance is not positive definite (min eigenvalue {min_eig:.3e}); "
            "apply calibration (shrink and/or pd correction) before solving"
        )
    c = -program.risk_tolerance * moments.mean

    rows, b, kinds = [], [], []
    eq_rows, eq_b, eq_kinds = [], [], []
    if program.include_simplex:
        eq_rows.append(np.ones(k))
        eq_b.append(1.0)
        eq_kinds.append("budget")
        for j in range(k):
            row = np.zeros(k)
            row[j] = -1.0
            rows.append(row)
            b.append(0.0)
            kinds.append("bound")
    if np.isfinite(program.min_return):
        rows.append(-moments.mean.copy())
        b.append(-float(program.min_return))
        kinds.append("min_return")
    if program.extra_ineq is not None:
        C, d = program.extra_ineq
        for row, dj in zip(C, d):
            if dj == np.inf:
                continue  # dropped constraint
            if dj == -np.inf:
                raise CompileError("qp.compile: -inf inequality bound is not a droppable constraint")
            rows.append(np.asarray(row, dtype=float))
            b.append(float(dj))
            kinds.append("extra")
    if program.extra_eq is not None:
        F, e = program.extra_eq
        for row, ej in zip(F, e):
            if not np.isfinite(ej):
                raise CompileError("qp.compile: non-finite equality right-hand side")
            eq_rows.append(np.asarray(row, dtype=float))
            eq_b.append(float(ej))
            eq_kinds.append("extra_eq")

    if not rows and not eq_rows:
        raise CompileError(
            "qp.compile: include_simplex=False with no extra constraints leaves the "
            "feasible set unbounded; explicit constraints are required"
        )

    qp = StandardQP(
        Q=Q,
        c=c,
        A_ineq=np.array(rows, dtype=float).reshape(len(rows), k),
        b_ineq=np.array(b, dtype=float),
        ineq_kinds=tuple(kinds),
        A_eq=np.array(eq_rows, dtype=float).reshape(len(eq_rows), k),
        b_eq=np.array(eq_b, dtype=float),
        eq_kinds=tuple(eq_kinds),
        simplex=bool(program.include_simplex),
    )
    _feasible_point(qp)  # feasibility probe; raises InfeasibleError with a certificate
    return qp


def _simplex_fast_start(qp):
    """Feasible vertex for pure simplex(+min_return) programs without a phase-1 LP."""
    if not qp.simplex or "extra" in qp.ineq_kinds or "extra_eq" in qp.eq_kinds:
        return None
    k = qp.k
    if "min_return" not in qp.ineq_kinds:
        x = np.zeros(k)
        x[0] = 1.0
        return x
    j = int(np.where(np.array(qp.ineq_kinds) == "min_return")[0][0])
    means = -qp.A_ineq[j]
    floor = -qp.b_ineq[j]
    best = int(np.argmax(means))
    if means[best] < floor - 1e-12:
        raise InfeasibleError(
            f"qp: infeasible program: min_return {floor:g} exceeds the largest "
            f"estimated mean {means[best]:g}; no convex weight vector can reach it",
            certificate={"ineq_multipliers": _unit(j, qp.b_ineq.size), "gap": floor - means[best]},
        )
    x = np.zeros(k)
    x[best] = 1.0
    return x


def _unit(j, size):
    u = np.zeros(size)
    u[j] = 1.0
    return u


def _feasible_point(qp):
    """Find a feasible point, raising a typed infeasibility error with a
    Farkas-style certificate (dual multipliers of the minimal-violation LP)."""
    fast = _simplex_fast_start(qp)
    if fast is not None:
        return fast

    k = qp.k
    r, re = qp.b_ineq.size, qp.b_eq.size
    # minimize total violation: A x - s <= b, A_eq x + tp - tm = b_eq, s, tp, tm >= 0
    n_var = k + r + 2 * re
    cost = np.concatenate([np.zeros(k), np.ones(r + 2 * re)])
    A_ub = np.hstack([qp.A_ineq, -np.eye(r), np.zeros((r, 2 * re))]) if r else None
    A_eq = np.hstack([qp.A_eq, np.zeros((re, r)), np.eye(re), -np.eye(re)]) if re else None
    bounds = [(None, None)] * k + [(0, None)] * (r + 2 * re)
    res = linprog(cost, A_ub=A_ub, b_ub=qp.b_ineq if r else None,
                  A_eq=A_eq, b_eq=qp.b_eq if re else None, bounds=bounds, method="highs")
    if not res.success:
        raise SolverError(f"qp: phase-1 feasibility LP failed: {res.message}")
    if res.fun > 1e-9:
        certificate = {
            "gap": float(res.fun),
            "ineq_multipliers": (-np.asarray(res.ineqlin.marginals) if r else np.zeros(0)),
            "eq_multipliers": (-np.asarray(res.eqlin.marginals) if re else np.zeros(0)),
        }
        raise InfeasibleError(
            f"qp: infeasible program: minimal total constraint violation is {res.fun:.3e} > 0; "
            "the attached multipliers certify an inconsistent constraint subset",
            certificate=certificate,
        )
    x = res.x[:k]
    return _snap_to_active(qp, x)


def _snap_to_active(qp, x):
    """Project onto the near-active rows so the start satisfies them exactly."""
    slack = qp.b_ineq - qp.A_ineq @ x if qp.b_ineq.size else np.zeros(0)
    act = np.where(np.abs(slack) <= 1e-7)[0]
    G = np.vstack([qp.A_ineq[act], qp.A_eq]) if (act.size or qp.b_eq.size) else None
    if G is None or G.size == 0:
        return x
    h = np.concatenate([qp.b_ineq[act], qp.b_eq])
    correction, *_ = np.linalg.lstsq(G, G @ x - h, rcond=None)
    return x - correction


def _independent_prefix(base, rows, indices):
    """Greedily keep indices whose rows stay linearly independent above `base`."""
    kept = []
    stack = base
    for j in indices:
        cand = np.vstack([stack, rows[j][None, :]])
        if np.linalg.matrix_rank(cand, tol=1e-10) == cand.shape[0]:
            kept.append(j)
            stack = cand
    return kept, stack


def _kkt_solve(Q, c, G, h):
    k = Q.shape[0]
    m = G.shape[0]
    kkt = np.block([[Q, G.T], [G, np.zeros((m, m))]]) if m else Q
    rhs = np.concatenate([-c, h]) if m else -c
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:k], sol[k:]


def solve(qp: StandardQP) -> QPSolution:
    """Solve a strictly convex QP to KKT residuals <= 1e-8.

    Raises InfeasibleError when the constraint set is empty and SolverError on
    the 1000-iteration cap or unmet tolerances (with last iterate attached).
    """
    k = qp.k
    x = _feasible_point(qp)
    n_ineq = qp.b_ineq.size

    # independent equality rows used in KKT solves; all rows are still checked at the end
    eq_keep, eq_stack = _independent_prefix(np.zeros((0, k)), qp.A_eq, range(qp.b_eq.size))
    A_eqk, b_eqk = qp.A_eq[eq_keep], qp.b_eq[eq_keep]

    slack = qp.b_ineq - qp.A_ineq @ x if n_ineq else np.zeros(0)
    start = [j for j in range(n_ineq) if abs(slack[j]) <= 1e-9]
    working, _ = _independent_prefix(eq_stack, qp.A_ineq, start)
    working.sort()

    mult = np.zeros(0)
    for _ in range(MAX_ITER):
        G = np.vstack([qp.A_ineq[working], A_eqk]) if (working or b_eqk.size) else np.zeros((0, k))
        h = np.concatenate([qp.b_ineq[working], b_eqk])
        x_sub, mult = _kkt_solve(qp.Q, qp.c, G, h)
        p = x_sub - x
        if np.max(np.abs(p), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(x))):
            x = x_sub
            duals_w = mult[: len(working)]
            if duals_w.size == 0 or duals_w.min() >= -1e-11:
                break
            working.pop(int(np.argmin(duals_w)))  # most-negative dual; ties -> lowest index
        else:
            alpha, blocker = 1.0, None
            if n_ineq:
                outside = np.setdiff1d(np.arange(n_ineq), working, assume_unique=False)
                denom = qp.A_ineq[outside] @ p
                gaps = qp.b_ineq[outside] - qp.A_ineq[outside] @ x
                for j, dj, gj in zip(outside, denom, gaps):
                    if dj > 1e-13:
                        ratio = max(gj, 0.0) / dj
                        if ratio < alpha - 1e-13:
                            alpha, blocker = ratio, int(j)
            x = x + alpha * p
            if blocker is not None:
                working.append(blocker)
                working.sort()
    else:
        raise SolverError(
            f"qp.solve: iteration cap ({MAX_ITER}) exceeded without satisfying the KKT conditions",
            last_iterate=x,
            residuals=_residuals(qp, x, np.zeros(n_ineq), np.zeros(qp.b_eq.size)),
        )

    gamma = np.zeros(n_ineq)
    if working:
        gamma[working] = np.maximum(mult[: len(working)], 0.0)
    nu = np.zeros(qp.b_eq.size)
    nu[eq_keep] = mult[len(working):]

    res = _residuals(qp, x, gamma, nu)
    if max(res["feasibility"], res["complementarity"], res["stationarity"]) > STATIONARITY_TOL:
        raise SolverError(
            "qp.solve: solution failed KKT tolerances "
            f"(feas {res['feasibility']:.2e}, comp {res['complementarity']:.2e}, "
            f"stat {res['stationarity']:.2e})",
            last_iterate=x,
            residuals=res,
        )

    diag = _diagnostics(qp, x, gamma)
    objective = float(0.5 * x @ qp.Q @ x + qp.c @ x)
    return QPSolution(
        weights=x,
        duals_ineq=gamma,
        duals_eq=nu,
        active_set=diag.active_set,
        kkt_residual=res["stationarity"],
        licq_ok=diag.licq_ok,
        sc_ok=diag.sc_ok,
        objective=objective,
    )


def _residuals(qp, x, gamma, nu):
    viol_ineq = np.max(qp.A_ineq @ x - qp.b_ineq, initial=0.0) if qp.b_ineq.size else 0.0
    viol_eq = np.max(np.abs(qp.A_eq @ x - qp.b_eq), initial=0.0) if qp.b_eq.size else 0.0
    slack = qp.b_ineq - qp.A_ineq @ x if qp.b_ineq.size else np.zeros(0)
    comp = np.max(np.abs(gamma * slack), initial=0.0)
    grad = qp.Q @ x + qp.c
    if qp.b_ineq.size:
        grad = grad + qp.A_ineq.T @ gamma
    if qp.b_eq.size:
        grad = grad + qp.A_eq.T @ nu
    return {
        "feasibility": float(max(viol_ineq, viol_eq, 0.0)),
        "complementarity": float(comp),
        "stationarity": float(np.linalg.norm(grad)),
    }


@dataclass(frozen=True)
class KKTDiagnostics:
    active_set: Tuple[int, ...]
    licq_ok: bool
    sc_ok: bool


def _diagnostics(qp, weights, duals_ineq, tol_active=1e-7, tol_dual=1e-7):
    if qp.b_ineq.size:
        slack = np.abs(qp.A_ineq @ weights - qp.b_ineq)
        active = tuple(int(j) for j in np.where(slack <= tol_active)[0])
    else:
        active = ()
    stacked = np.vstack([qp.A_ineq[list(active)], qp.A_eq]) if (active or qp.b_eq.size) else np.zeros((0, qp.k))
    if stacked.shape[0] == 0:
        licq_ok = True
    else:
        s = np.linalg.svd(stacked, compute_uv=False)
        licq_ok = bool(np.sum(s > 1e-10 * s[0]) == stacked.shape[0]) if s[0] > 0 else False
    sc_ok = all(duals_ineq[j] > tol_dual for j in active)
    return KKTDiagnostics(active_set=active, licq_ok=licq_ok, sc_ok=sc_ok)


def kkt_diagnostics(qp: StandardQP, sol: QPSolution, tol_active=1e-7, tol_dual=1e-7) -> KKTDiagnostics:
    """Active set by slack tolerance, LICQ by SVD row rank of the active rows
    stacked with the equalities (cutoff 1e-10 * sigma_max), SC iff every active
    inequality has dual > tol_dual."""
    return _diagnostics(qp, sol.weights, sol.duals_ineq, tol_active, tol_dual)


@dataclass(frozen=True)
class OracleSolution:
    weights: np.ndarray
    objective: float


def _simplex_lattice_chunks(M, k):
    if k == 1:
        yield np.array([[M]], dtype=float)
    elif k == 2:
        i = np.arange(M + 1, dtype=float)
        yield np.column_stack([i, M - i])
    elif k == 3:
        i1 = np.repeat(np.arange(M + 1), np.arange(M + 1, 0, -1))
        i2 = np.concatenate([np.arange(M + 1 - v) for v in range(M + 1)])
        yield np.column_stack([i1, i2, M - i1 - i2]).astype(float)
    else:
        for i1 in range(M + 1):
            for inner in _simplex_lattice_chunks(M - i1, 3):
                block = np.column_stack([np.full(len(inner), float(i1)), inner])
                yield block


def brute_force_oracle(qp: StandardQP, grid_step: float) -> OracleSolution:
    """Exhaustive simplex-lattice minimizer, the independent oracle for `solve`.

    Evaluates the objective at every lattice point with spacing grid_step that
    satisfies the non-simplex inequality rows; the returned objective is within
    (Lipschitz constant) * grid_step of the optimum. Simplex programs with
    k <= 4 only.
    """
    if not qp.simplex:
        raise SolverError("qp.brute_force_oracle: only include_simplex programs are supported")
    if "extra_eq" in qp.eq_kinds:
        raise SolverError("qp.brute_force_oracle: extra equality rows are not supported")
    if qp.k > 4:
        raise SolverError(f"qp.brute_force_oracle: k={qp.k} > 4 would need a combinatorial lattice")
    M = int(round(1.0 / grid_step))
    other = [j for j, kind in enumerate(qp.ineq_kinds) if kind != "bound"]
    A_other, b_other = qp.A_ineq[other], qp.b_ineq[other]

    best_w, best_f = None, np.inf
    for chunk in _simplex_lattice_chunks(M, qp.k):
        W = chunk / M
        if other:
            mask = np.all(W @ A_other.T <= b_other + 1e-12, axis=1)
            W = W[mask]
        if W.shape[0] == 0:
            continue
        obj = 0.5 * np.einsum("ij,ij->i", W @ qp.Q, W) + W @ qp.c
        j = int(np.argmin(obj))
        if obj[j] < best_f:
            best_f, best_w = float(obj[j]), W[j]
    if best_w is None:
        raise InfeasibleError(
            "qp.brute_force_oracle: no lattice point satisfies the constraints "
            "(empty lattice implies an infeasible or near-infeasible program)"
        )
    return OracleSolution(weights=best_w, objective=best_f)


@dataclass(frozen=True)
class FrontierPoint:
    risk_tolerance: float
    weights: np.ndarray
    mean: float
    variance: float


def sweep_frontier(moments: CounterfactualMoments, lambda_grid, min_return=-np.inf,
                   include_simplex=True, extra_ineq=None, extra_eq=None):
    """One solve per risk tolerance; returns FrontierPoints in grid order.

    The grid must be nonnegative and sorted. The Pareto property (mean and
    variance nondecreasing in lambda) is checked and warned about, never
    failed, on reversals beyond numerical ties (1e-10).
    """
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise DataError("qp.sweep_frontier: lambda grid must be a nonempty 1-d sequence")
    if np.any(grid < 0) or np.any(~np.isfinite(grid)):
        raise DataError("qp.sweep_frontier: lambda grid must be finite and nonnegative")
    if np.any(np.diff(grid) < 0):
        raise DataError("qp.sweep_frontier: lambda grid must be sorted ascending")

    points = []
    for lam in grid:
        program = MVProgram(moments, risk_tolerance=float(lam), min_return=min_return,
                            extra_ineq=extra_ineq, extra_eq=extra_eq,
                            include_simplex=include_simplex)
        sol = solve(compile_program(program))
        w = sol.weights
        points.append(FrontierPoint(
            risk_tolerance=float(lam),
            weights=w,
            mean=float(w @ moments.mean),
            variance=float(w @ moments.covariance @ w),
        ))
    for prev, cur in zip(points, points[1:]):
        if cur.mean < prev.mean - 1e-10 or cur.variance < prev.variance - 1e-10:
            warnings.warn(
                f"qp.sweep_frontier: Pareto reversal between lambda={prev.risk_tolerance:g} "
                f"and lambda={cur.risk_tolerance:g} beyond the 1e-10 tie tolerance",
                stacklevel=2,
            )
    return points
