"""Dense QP condensing and the explicit dual problem.

``condense`` eliminates the predicted states from a finite-horizon MPC
instance, producing the strictly convex dense program

    minimize  0.5 U'Q U + c'U        subject to  H U <= h,

over the stacked input sequence ``U = (u_0, ..., u_{T-1})``.  Cost terms
that do not depend on ``U`` are kept in ``const_term`` so the condensed
optimum plus ``const_term`` equals the original trajectory cost.

``build_dual`` forms the concave dual

    maximize  d(lam) = -0.5 lam'M lam - r'lam + g_const   over lam >= 0,

with ``M = H Q^{-1} H'``, ``r = H Q^{-1} c + h`` and
``g_const = -0.5 c'Q^{-1} c``.  For any primal-feasible U and any lam >= 0,
``d(lam) <= 0.5 U'Q U + c'U`` (weak duality), which is what makes the
online duality gap a sound suboptimality certificate.

Constraint row order is fixed so multiplier indices are stable: for each
stage k = 0..T-1, input rows for u_k, then rate rows for u_k - u_{k-1}
(upper bounds first, then lower), then state rows for x_{k+1}; terminal-set
rows for x_T come last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, TextIO, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DimensionError, NumericalError
from .lpv_mpc import LPVSystem, MPCSpec, ParameterVector, eval_system

__all__ = [
    "DenseQP",
    "DualQP",
    "condense",
    "build_dual",
    "primal_objective",
    "dual_objective",
    "primal_feasible",
    "dual_feasible",
    "duality_gap",
    "certificate_values",
    "recover_primal",
    "write_dense_qp",
    "read_dense_qp",
    "write_dual_qp",
]

_SYM_TOL = 1e-10
_PIVOT_REL = 1e-10


@dataclass(frozen=True, eq=False)
class DenseQP:
    """Strictly convex inequality-constrained QP in stacked-input form."""

    Q: np.ndarray
    c: np.ndarray
    H: np.ndarray
    h: np.ndarray
    const_term: float = 0.0

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        c = np.array(self.c, dtype=float).reshape(-1)
        H = np.array(self.H, dtype=float)
        h = np.array(self.h, dtype=float).reshape(-1)
        n = c.shape[0]
        if Q.shape != (n, n):
            raise DimensionError(f"Q shape {Q.shape} does not match c dim {n}")
        if H.size == 0:
            H = H.reshape(0, n)
        if H.ndim != 2 or H.shape[1] != n:
            raise DimensionError(f"H shape {H.shape} does not match variable dim {n}")
        if h.shape != (H.shape[0],):
            raise DimensionError(f"h dim {h.shape[0]} does not match H rows {H.shape[0]}")
        scale = max(1.0, float(np.abs(Q).max()))
        if float(np.abs(Q - Q.T).max()) > _SYM_TOL * scale:
            raise NumericalError("Q is not symmetric within tolerance")
        try:
            chol = cho_factor(Q, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError("Q is not positive definite (Cholesky failed)") from None
        pivots = np.diag(chol[0]) ** 2
        floor = _PIVOT_REL * float(np.diag(Q).max())
        if float(pivots.min()) <= floor:
            raise NumericalError(
                f"Q is numerically singular: smallest Cholesky pivot {pivots.min():.3e} "
                f"<= {floor:.3e}"
            )
        for name, arr in (("Q", Q), ("c", c), ("H", H), ("h", h)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "const_term", float(self.const_term))
        object.__setattr__(self, "_chol", chol)
        zc = cho_solve(chol, c, check_finite=False)
        zc.setflags(write=False)
        object.__setattr__(self, "_Qinv_c", zc)
        object.__setattr__(self, "_g_const", -0.5 * float(c @ zc))

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m(self) -> int:
        return self.h.shape[0]

    def solve_Q(self, rhs: np.ndarray) -> np.ndarray:
        """Apply Q^{-1} using the cached Cholesky factor."""
        return cho_solve(self._chol, rhs, check_finite=False)


@dataclass(frozen=True, eq=False)
class DualQP:
    """Concave dual of a DenseQP: maximize -0.5 lam'M lam - r'lam + g_const."""

    M: np.ndarray
    r: np.ndarray
    g_const: float

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        r = np.array(self.r, dtype=float).reshape(-1)
        m = r.shape[0]
        if M.size == 0:
            M = M.reshape(m, m)
        if M.shape != (m, m):
            raise DimensionError(f"M shape {M.shape} does not match r dim {m}")
        scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
        if M.size and float(np.abs(M - M.T).max()) > 1e-9 * scale:
            raise NumericalError("M is not symmetric within tolerance")
        M.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "g_const", float(self.g_const))

    @property
    def m(self) -> int:
        return self.r.shape[0]


def _stage_matrices(system: LPVSystem, pv: ParameterVector, T: int):
    if system.frozen_scheduling or system.n_q == 0:
        A, B, e_dir = eval_system(system, pv.q_seq[0] if system.n_q else np.zeros(0))
        mats = [(A, B, e_dir)] * T
    else:
        mats = [eval_system(system, pv.q_seq[k]) for k in range(T)]
    return mats


def condense(system: LPVSystem, spec: MPCSpec, pv: ParameterVector) -> DenseQP:
    """Eliminate states from one MPC instance at parameter ``pv``.

    In tracking mode the stage-0 output error depends only on the measured
    state and is absorbed into ``const_term``.  State rows constrain the
    predicted states x_1 .. x_T; the current state is not encoded.
    """
    T = spec.horizon
    n_x, n_u = system.n_x, system.n_u
    if spec.R.shape[0] != n_u:
        raise DimensionError(f"R is {spec.R.shape[0]}x{spec.R.shape[0]} but the system has n_u={n_u}")
    if spec.Q_f.shape[0] != n_x:
        raise DimensionError(f"Q_f is {spec.Q_f.shape[0]}x{spec.Q_f.shape[0]} but the system has n_x={n_x}")
    x0 = np.asarray(pv.x0, dtype=float).reshape(-1)
    if x0.shape != (n_x,):
        raise DimensionError(f"x0 has dim {x0.shape[0]}, expected {n_x}")
    if pv.q_seq.shape != (T, system.n_q):
        raise DimensionError(f"q_seq shape {pv.q_seq.shape} does not match (T={T}, n_q={system.n_q})")
    if spec.tracking:
        C = system.output_map if system.output_map is not None else np.eye(n_x)
        n_y = C.shape[0]
        if spec.Q.shape[0] != n_y:
            raise DimensionError(f"tracking Q is {spec.Q.shape[0]}x{spec.Q.shape[0]} but n_y={n_y}")
        if pv.y_ref_seq is None or pv.y_ref_seq.shape != (T, n_y):
            raise DimensionError(f"tracking requires y_ref_seq of shape ({T}, {n_y})")
    else:
        if spec.Q.shape[0] != n_x:
            raise DimensionError(f"Q is {spec.Q.shape[0]}x{spec.Q.shape[0]} but the system has n_x={n_x}")
    if spec.du_max is not None and pv.u_prev is None:
        raise DimensionError("rate constraints require u_prev in the parameter")
    delta = pv.delta_seq if pv.delta_seq is not None else np.zeros(T)
    if delta.shape != (T,):
        raise DimensionError(f"delta_seq has shape {delta.shape}, expected ({T},)")

    mats = _stage_matrices(system, pv, T)
    n_U = T * n_u

    # Prediction: x_{k+1} = F[k] x0 + G[k] U + w[k], blocks over k = 0..T-1.
    F = np.empty((T, n_x, n_x))
    G = np.zeros((T, n_x, n_U))
    w = np.empty((T, n_x))
    x_aff = x0
    phi = np.eye(n_x)
    for k, (A, B, e_dir) in enumerate(mats):
        if k == 0:
            F[0] = A
            w[0] = e_dir * delta[0]
        else:
            F[k] = A @ F[k - 1]
            G[k] = A @ G[k - 1]
            w[k] = A @ w[k - 1] + e_dir * delta[k]
        G[k][:, k * n_u:(k + 1) * n_u] = B

    # Stacked prediction of x_1..x_T as an affine map of U.
    Su = G.reshape(T * n_x, n_U)
    bias = (F @ x0 + w).reshape(T * n_x)  # = x_pred when U = 0

    QU = np.zeros((n_U, n_U))
    cU = np.zeros(n_U)
    const = 0.0

    if spec.tracking:
        # sum_{k=0}^{T-1} (C x_k - y_ref_k)' Q (C x_k - y_ref_k); the k=0
        # term is constant, terms k=1..T-1 involve the predicted states.
        e0 = C @ x0 - pv.y_ref_seq[0]
        const += float(e0 @ spec.Q @ e0)
        for k in range(1, T):
            rows = slice((k - 1) * n_x, k * n_x)
            Gk = Su[rows]
            bk = bias[(k - 1) * n_x:k * n_x]
            CG = C @ Gk
            err0 = C @ bk - pv.y_ref_seq[k]
            QU += CG.T @ spec.Q @ CG
            cU += CG.T @ (spec.Q @ err0)
            const += float(err0 @ spec.Q @ err0)
    else:
        const += float(x0 @ spec.Q @ x0)
        for k in range(1, T):
            rows = slice((k - 1) * n_x, k * n_x)
            Gk = Su[rows]
            bk = bias[(k - 1) * n_x:k * n_x]
            QU += Gk.T @ spec.Q @ Gk
            cU += Gk.T @ (spec.Q @ bk)
            const += float(bk @ spec.Q @ bk)

    # Terminal cost on x_T and the input block.
    rows = slice((T - 1) * n_x, T * n_x)
    GT = Su[rows]
    bT = bias[(T - 1) * n_x:T * n_x]
    QU += GT.T @ spec.Q_f @ GT
    cU += GT.T @ (spec.Q_f @ bT)
    const += float(bT @ spec.Q_f @ bT)
    for k in range(T):
        blk = slice(k * n_u, (k + 1) * n_u)
        QU[blk, blk] += spec.R

    Q = QU + QU.T  # 0.5 U'Q U convention with Q = 2 * (quadratic coefficient)
    c = 2.0 * cU

    # Constraints, stage by stage: inputs, rates, states; terminal last.
    H_rows = []
    h_rows = []
    m_u = spec.H_u.shape[0]
    for k in range(T):
        blk = slice(k * n_u, (k + 1) * n_u)
        if m_u:
            Hk = np.zeros((m_u, n_U))
            Hk[:, blk] = spec.H_u
            H_rows.append(Hk)
            h_rows.append(spec.h_u)
        if spec.du_max is not None:
            D = np.zeros((n_u, n_U))
            D[:, blk] = np.eye(n_u)
            if k == 0:
                rhs_shift = pv.u_prev
            else:
                D[:, (k - 1) * n_u:k * n_u] = -np.eye(n_u)
                rhs_shift = np.zeros(n_u)
            H_rows.append(D)
            h_rows.append(spec.du_max + rhs_shift)
            H_rows.append(-D)
            h_rows.append(spec.du_max - rhs_shift)
        if spec.H_x is not None:
            state_rows = slice(k * n_x, (k + 1) * n_x)
            H_rows.append(spec.H_x @ Su[state_rows])
            h_rows.append(spec.h_x - spec.H_x @ bias[state_rows])
    if spec.H_f is not None:
        H_rows.append(spec.H_f @ GT)
        h_rows.append(spec.h_f - spec.H_f @ bT)

    if H_rows:
        H = np.vstack(H_rows)
        h = np.concatenate(h_rows)
    else:
        H = np.zeros((0, n_U))
        h = np.zeros(0)
    return DenseQP(Q=Q, c=c, H=H, h=h, const_term=const)


def build_dual(qp: DenseQP) -> DualQP:
    """Form the explicit dual of a condensed QP via one Cholesky of Q."""
    Qinv_c = qp._Qinv_c
    g_const = qp._g_const
    if qp.m == 0:
        return DualQP(M=np.zeros((0, 0)), r=np.zeros(0), g_const=g_const)
    Y = qp.solve_Q(qp.H.T)          # Q^{-1} H'
    M = qp.H @ Y
    M = 0.5 * (M + M.T)             # enforce exact symmetry
    r = qp.H @ Qinv_c + qp.h
    return DualQP(M=M, r=r, g_const=g_const)


def primal_objective(qp: DenseQP, U: np.ndarray) -> float:
    """Constant-free primal value 0.5 U'Q U + c'U."""
    U = np.asarray(U, dtype=float).reshape(-1)
    if U.shape != (qp.n,):
        raise DimensionError(f"U has dim {U.shape[0]}, expected {qp.n}")
    return 0.5 * float(U @ (qp.Q @ U)) + float(qp.c @ U)


def dual_objective(dq: DualQP, lam: np.ndarray) -> float:
    """Dual value -0.5 lam'M lam - r'lam + g_const."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape != (dq.m,):
        raise DimensionError(f"lam has dim {lam.shape[0]}, expected {dq.m}")
    if dq.m == 0:
        return dq.g_const
    return -0.5 * float(lam @ (dq.M @ lam)) - float(dq.r @ lam) + dq.g_const


def primal_feasible(qp: DenseQP, U: np.ndarray, tol: float = 1e-6) -> Tuple[bool, float]:
    """Check H U <= h; returns the flag and the largest violation (0 if none)."""
    U = np.asarray(U, dtype=float).reshape(-1)
    if U.shape != (qp.n,):
        raise DimensionError(f"U has dim {U.shape[0]}, expected {qp.n}")
    if qp.m == 0:
        return True, 0.0
    worst = float((qp.H @ U - qp.h).max())
    return worst <= tol, max(worst, 0.0)


def dual_feasible(lam: np.ndarray, tol: float = 1e-6) -> Tuple[bool, float]:
    """Check lam >= 0 elementwise; returns the flag and the worst negativity."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size == 0:
        return True, 0.0
    worst = float((-lam).max())
    return worst <= tol, max(worst, 0.0)


def duality_gap(qp: DenseQP, dq: DualQP, U: np.ndarray, lam: np.ndarray) -> float:
    """Certificate value p(U) - d(lam); bounds p(U) - J* when U is feasible
    and lam >= 0."""
    return primal_objective(qp, U) - dual_objective(dq, lam)


def certificate_values(qp: DenseQP, U: np.ndarray, lam: np.ndarray):
    """One-pass certificate arithmetic: returns (p, d, gap, primal violation,
    dual violation).

    Algebraically identical to ``primal_objective`` / ``dual_objective`` on
    ``build_dual(qp)`` but evaluates d(lam) through the cached Cholesky
    factor of Q instead of forming M, which keeps the certified online path
    cheap.  Violations are the largest positive constraint residual and the
    largest negativity of lam (zero when clean).
    """
    U = np.asarray(U, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if U.shape != (qp.n,) or lam.shape != (qp.m,):
        raise DimensionError("certificate arguments do not match the QP dimensions")
    p = 0.5 * float(U @ (qp.Q @ U)) + float(qp.c @ U)
    zc = qp._Qinv_c
    g_const = qp._g_const
    if qp.m:
        y = qp.H.T @ lam
        z = cho_solve(qp._chol, y, check_finite=False)
        d = -0.5 * float(y @ z) - (float(zc @ y) + float(qp.h @ lam)) + g_const
        p_viol = max(float((qp.H @ U - qp.h).max()), 0.0)
        d_viol = max(float((-lam).max()), 0.0)
    else:
        d = g_const
        p_viol = 0.0
        d_viol = 0.0
    return p, d, p - d, p_viol, d_viol


def recover_primal(qp: DenseQP, lam: np.ndarray) -> np.ndarray:
    """Primal candidate U(lam) = -Q^{-1}(c + H'lam) (the Lagrangian minimizer)."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape != (qp.m,):
        raise DimensionError(f"lam has dim {lam.shape[0]}, expected {qp.m}")
    rhs = qp.c if qp.m == 0 else qp.c + qp.H.T @ lam
    return -qp.solve_Q(rhs)


# ---------------------------------------------------------------------------
# Text export (dimension header, row-major matrices, full precision)
# ---------------------------------------------------------------------------

def _write_matrix(fh: TextIO, name: str, mat: np.ndarray) -> None:
    fh.write(name + "\n")
    for row in np.atleast_2d(mat):
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_dense_qp(qp: DenseQP, path) -> None:
    """Write a DenseQP as plain text: header line ``denseqp n m`` then Q, c, H, h, const_term."""
    with open(path, "w") as fh:
        fh.write(f"denseqp {qp.n} {qp.m}\n")
        _write_matrix(fh, "Q", qp.Q)
        _write_matrix(fh, "c", qp.c)
        _write_matrix(fh, "H", qp.H if qp.m else np.zeros((0, qp.n)))
        _write_matrix(fh, "h", qp.h)
        fh.write("const_term\n")
        fh.write(repr(float(qp.const_term)) + "\n")


def read_dense_qp(path) -> DenseQP:
    """Read back a DenseQP written by ``write_dense_qp``."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    header = lines[0].split()
    if len(header) != 3 or header[0] != "denseqp":
        raise ConfigError(f"not a denseqp text file: header {lines[0]!r}")
    n, m = int(header[1]), int(header[2])
    idx = 1

    def read_block(name, rows, cols):
        nonlocal idx
        if lines[idx] != name:
            raise ConfigError(f"expected block '{name}', found {lines[idx]!r}")
        idx += 1
        block = np.array(
            [[float(v) for v in lines[idx + i].split()] for i in range(rows)]
        ).reshape(rows, cols)
        idx += rows
        return block

    Q = read_block("Q", n, n)
    c = read_block("c", 1, n).reshape(n)
    H = read_block("H", m, n)
    h = read_block("h", 1, m).reshape(m)
    const = read_block("const_term", 1, 1)[0, 0]
    return DenseQP(Q=Q, c=c, H=H, h=h, const_term=const)


def write_dual_qp(dq: DualQP, path) -> None:
    """Write a DualQP as plain text: header ``dualqp m`` then M, r, g_const."""
    with open(path, "w") as fh:
        fh.write(f"dualqp {dq.m}\n")
        _write_matrix(fh, "M", dq.M if dq.m else np.zeros((0, 0)))
        _write_matrix(fh, "r", dq.r)
        fh.write("g_const\n")
        fh.write(repr(float(dq.g_const)) + "\n")
