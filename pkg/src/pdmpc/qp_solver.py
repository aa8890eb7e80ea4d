"""High-accuracy dense QP solver used for labels, audits, and fallback.

A primal-dual interior-point method with Mehrotra-style predictor-corrector
steps, specialized to the inequality-only condensed form

    minimize 0.5 x'Q x + c'x   subject to  H x <= h.

The solver is deterministic: identical inputs and options produce identical
iterates.  Multipliers are polished to small complementarity so they can
serve as regression targets for the dual policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionError, NumericalError
from .lpv_mpc import LPVSystem, MPCSpec, ParameterVector
from .qp_core import DenseQP, condense, primal_objective

__all__ = [
    "SolverOptions",
    "KKTResiduals",
    "SolveResult",
    "solve",
    "check_kkt",
    "backup_action",
    "solve_call_count",
]

# Diagnostic counter: how many times solve() has run in this process.  Used
# by the runtime layer to prove that certified steps never touch the solver.
_SOLVE_CALLS = 0


def solve_call_count() -> int:
    return _SOLVE_CALLS


@dataclass(frozen=True)
class SolverOptions:
    """Termination and robustness knobs.

    ``tolerance`` bounds all four KKT residuals at convergence;
    ``regularization_floor`` is added to the Newton matrix diagonal only if
    its factorization fails.
    """

    tolerance: float = 1e-8
    max_iterations: int = 100
    regularization_floor: float = 1e-12


@dataclass(frozen=True)
class KKTResiduals:
    """Infinity norms of the four optimality residuals."""

    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float

    def worst(self) -> float:
        return max(self.stationarity, self.primal_feasibility,
                   self.dual_feasibility, self.complementarity)


@dataclass(frozen=True, eq=False)
class SolveResult:
    """Solver output: optimizer, multipliers, constant-free optimal value."""

    U_star: np.ndarray
    lambda_star: np.ndarray
    J_star: float
    status: str            # "optimal" | "max_iter" | "infeasible" | "numerical_failure"
    iterations: int
    kkt: KKTResiduals


def _residuals(qp: DenseQP, x: np.ndarray, lam: np.ndarray) -> KKTResiduals:
    r_stat = qp.Q @ x + qp.c
    if qp.m:
        r_stat = r_stat + qp.H.T @ lam
        slack = qp.H @ x - qp.h
        primal = float(np.maximum(slack, 0.0).max())
        dual = float(np.maximum(-lam, 0.0).max())
        comp = float(np.abs(lam * slack).max())
    else:
        primal = dual = comp = 0.0
    return KKTResiduals(
        stationarity=float(np.abs(r_stat).max()),
        primal_feasibility=primal,
        dual_feasibility=dual,
        complementarity=comp,
    )


def check_kkt(qp: DenseQP, result: SolveResult) -> KKTResiduals:
    """Recompute the four KKT residuals of a result from scratch."""
    U = np.asarray(result.U_star, dtype=float).reshape(-1)
    lam = np.asarray(result.lambda_star, dtype=float).reshape(-1)
    if U.shape != (qp.n,) or lam.shape != (qp.m,):
        raise DimensionError("result dimensions do not match the QP")
    return _residuals(qp, U, lam)


def _factor_newton(Q, H, d, reg_floor):
    """Cholesky of Q + H' diag(d) H with escalating diagonal regularization.

    The regularization is relative to the matrix scale: near convergence
    diag(d) carries entries of order 1/tol^2 and an absolute shift would
    vanish in rounding error.
    """
    K = Q + (H.T * d) @ H if H.size else Q.copy()
    scale = max(1.0, float(np.abs(np.diag(K)).max()))
    reg = 0.0
    for _ in range(12):
        try:
            return cho_factor(K + reg * np.eye(K.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            reg = reg * 100.0 if reg else reg_floor * scale
    raise NumericalError("Newton system factorization failed despite regularization")


def _polish(qp, x, lam):
    """Active-set polish near convergence.

    Splits rows by comparing lam to slack (scale free once the iterate is
    centered), then solves the equality-constrained KKT system on the
    active rows exactly.  Rounds the endgame of the interior-point loop,
    where diag(lam/s) conditioning caps the attainable stationarity.
    """
    slack = qp.h - qp.H @ x
    active = lam > slack
    A = qp.H[active]
    k = A.shape[0]
    n = qp.n
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = qp.Q
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    rhs = np.concatenate([-qp.c, qp.h[active]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    x_new = sol[:n]
    lam_new = np.zeros(qp.m)
    lam_new[active] = np.maximum(sol[n:], 0.0)
    return x_new, lam_new


def solve(qp: DenseQP, options: Optional[SolverOptions] = None) -> SolveResult:
    """Solve a DenseQP to high accuracy.

    Status is ``optimal`` when all KKT residuals fall below the tolerance,
    ``infeasible`` when the multiplier iterates diverge along a certificate
    of empty feasible set, ``max_iter`` when the iteration cap is reached
    (best iterate returned), and ``numerical_failure`` on a fatal
    factorization error.
    """
    global _SOLVE_CALLS
    _SOLVE_CALLS += 1
    opts = options or SolverOptions()
    tol = opts.tolerance
    n, m = qp.n, qp.m

    if m == 0:
        x = -qp.solve_Q(qp.c)
        res = _residuals(qp, x, np.zeros(0))
        return SolveResult(
            U_star=x, lambda_star=np.zeros(0), J_star=primal_objective(qp, x),
            status="optimal", iterations=0, kkt=res,
        )

    H, h = qp.H, qp.h
    x = -qp.solve_Q(qp.c)
    slack0 = h - H @ x
    shift = max(0.0, -1.5 * float(slack0.min())) + 1.0
    s = slack0 + shift
    lam = np.ones(m)
    lam_scale0 = 1.0

    best = None
    status = "max_iter"
    it = 0
    try:
        for it in range(1, opts.max_iterations + 1):
            r_d = qp.Q @ x + qp.c + H.T @ lam
            r_p = H @ x + s - h
            comp_vec = lam * s
            mu = float(comp_vec.mean())

            res = _residuals(qp, x, lam)
            if best is None or res.worst() < best[0]:
                best = (res.worst(), x.copy(), lam.copy(), res)
            if res.worst() <= tol:
                status = "optimal"
                break
            if res.worst() <= np.sqrt(tol):
                x_p, lam_p = _polish(qp, x, lam)
                if _residuals(qp, x_p, lam_p).worst() <= tol:
                    x, lam = x_p, lam_p
                    status = "optimal"
                    break

            # Divergence along a Farkas-type direction signals an empty
            # feasible set: multipliers blow up while primal residual stalls.
            if float(np.abs(lam).max()) > 1e10 * lam_scale0 and res.primal_feasibility > np.sqrt(tol):
                status = "infeasible"
                break

            d = lam / s
            factor = _factor_newton(qp.Q, H, d, opts.regularization_floor)

            def newton_step(r_c):
                rhs = -r_d - H.T @ ((lam * r_p - r_c) / s)
                dx = cho_solve(factor, rhs, check_finite=False)
                ds = -r_p - H @ dx
                dlam = (lam * r_p - r_c) / s + d * (H @ dx)
                return dx, ds, dlam

            # Predictor (affine scaling), then centering-corrector.
            dx_a, ds_a, dlam_a = newton_step(comp_vec)
            alpha_a = _max_step(s, ds_a, lam, dlam_a)
            mu_aff = float((lam + alpha_a * dlam_a) @ (s + alpha_a * ds_a)) / m
            sigma = min(1.0, max(0.0, (mu_aff / mu)) ** 3) if mu > 0 else 0.0
            r_c = comp_vec - sigma * mu + dlam_a * ds_a
            dx, ds, dlam = newton_step(r_c)

            alpha = 0.995 * _max_step(s, ds, lam, dlam)
            alpha = min(1.0, alpha)
            x = x + alpha * dx
            s = s + alpha * ds
            lam = lam + alpha * dlam
    except NumericalError:
        if best is None:
            raise
        status = "numerical_failure"

    if status == "optimal":
        x_out, lam_out, res_out = x, lam, _residuals(qp, x, lam)
    else:
        _, x_out, lam_out, res_out = best
    return SolveResult(
        U_star=x_out, lambda_star=lam_out, J_star=primal_objective(qp, x_out),
        status=status, iterations=it, kkt=res_out,
    )


def _max_step(s, ds, lam, dlam):
    """Largest step in (0, 1] keeping s and lam strictly positive."""
    alpha = 1.0
    neg = ds < 0
    if np.any(neg):
        alpha = min(alpha, float((-s[neg] / ds[neg]).min()))
    neg = dlam < 0
    if np.any(neg):
        alpha = min(alpha, float((-lam[neg] / dlam[neg]).min()))
    return alpha


def backup_action(system: LPVSystem, spec: MPCSpec, pv: ParameterVector,
                  options: Optional[SolverOptions] = None) -> np.ndarray:
    """Exactly solve the instance at ``pv`` and return the first input block.

    This is the fallback the runtime applies when a learned action cannot be
    certified.  A non-optimal status escalates as a numerical error; the
    caller decides the last-resort policy.
    """
    qp = condense(system, spec, pv)
    result = solve(qp, options)
    if result.status != "optimal":
        raise NumericalError(f"backup solve failed with status '{result.status}'")
    return result.U_star[:system.n_u]
