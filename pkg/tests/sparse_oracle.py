"""Independent sparse MPC formulation solved with cvxopt.

Keeps the predicted states as decision variables with explicit dynamics
equality constraints instead of eliminating them, so it shares no code
path with the condensing routine under test.  Intended for tests only.
"""

from __future__ import annotations

import numpy as np
from cvxopt import matrix, solvers

from pdmpc.lpv_mpc import LPVSystem, MPCSpec, ParameterVector, eval_system

solvers.options["show_progress"] = False
solvers.options["abstol"] = 1e-10
solvers.options["reltol"] = 1e-10
solvers.options["feastol"] = 1e-10


def solve_sparse(system: LPVSystem, spec: MPCSpec, pv: ParameterVector):
    """Solve the stacked (states-and-inputs) MPC problem directly.

    Decision vector z = (x_1..x_T, u_0..u_{T-1}).  Returns (objective,
    stacked inputs), where the objective includes every parameter-dependent
    constant so it is comparable to the condensed optimum plus its constant
    term.
    """
    T = spec.horizon
    n_x, n_u = system.n_x, system.n_u
    n_z = T * n_x + T * n_u
    x_off = lambda k: (k - 1) * n_x          # x_k for k = 1..T
    u_off = lambda k: T * n_x + k * n_u      # u_k for k = 0..T-1

    x0 = np.asarray(pv.x0, dtype=float).reshape(n_x)
    q_seq = np.asarray(pv.q_seq, dtype=float).reshape(T, system.n_q)
    delta = (np.zeros(T) if pv.delta_seq is None
             else np.asarray(pv.delta_seq, dtype=float).reshape(T))

    # objective: sum_k ||C x_k - r_k||_Q^2 (k = 0..T-1) + x_T' Qf x_T
    #            + sum_k u_k' R u_k; the k = 0 output term is constant.
    C = system.output_map if system.output_map is not None else np.eye(n_x)
    n_y = C.shape[0]
    if spec.tracking:
        refs = np.asarray(pv.y_ref_seq, dtype=float).reshape(T, n_y)
    else:
        refs = np.zeros((T, n_y))

    P = np.zeros((n_z, n_z))
    q_lin = np.zeros(n_z)
    const = float((C @ x0 - refs[0]) @ spec.Q @ (C @ x0 - refs[0]))
    CQC = C.T @ spec.Q @ C
    for k in range(1, T):
        sl = slice(x_off(k), x_off(k) + n_x)
        P[sl, sl] += 2.0 * CQC
        q_lin[sl] += -2.0 * (C.T @ spec.Q @ refs[k])
        const += float(refs[k] @ spec.Q @ refs[k])
    sl = slice(x_off(T), x_off(T) + n_x)
    P[sl, sl] += 2.0 * spec.Q_f
    for k in range(T):
        sl = slice(u_off(k), u_off(k) + n_u)
        P[sl, sl] += 2.0 * spec.R

    # dynamics equalities: x_{k+1} = A x_k + B u_k + e delta_k
    A_eq = np.zeros((T * n_x, n_z))
    b_eq = np.zeros(T * n_x)
    for k in range(T):
        A, B, e_dir = eval_system(system, q_seq[k])
        rows = slice(k * n_x, (k + 1) * n_x)
        A_eq[rows, x_off(k + 1):x_off(k + 1) + n_x] = np.eye(n_x)
        A_eq[rows, u_off(k):u_off(k) + n_u] = -B
        rhs = e_dir * delta[k]
        if k == 0:
            rhs = rhs + A @ x0
        else:
            A_eq[rows, x_off(k):x_off(k) + n_x] = -A
        b_eq[rows] = rhs

    # inequalities: inputs, rates, states x_1..x_T, terminal set
    G_rows, h_rows = [], []

    def add(row, rhs):
        G_rows.append(row)
        h_rows.append(rhs)

    for k in range(T):
        if spec.H_u is not None:
            for j in range(spec.H_u.shape[0]):
                row = np.zeros(n_z)
                row[u_off(k):u_off(k) + n_u] = spec.H_u[j]
                add(row, spec.h_u[j])
        if spec.du_max is not None:
            for j in range(n_u):
                row = np.zeros(n_z)
                row[u_off(k) + j] = 1.0
                rhs = spec.du_max[j]
                if k == 0:
                    rhs += float(pv.u_prev[j])
                else:
                    row[u_off(k - 1) + j] = -1.0
                add(row, rhs)
                row = -row
                rhs = spec.du_max[j]
                if k == 0:
                    rhs -= float(pv.u_prev[j])
                add(row, rhs)
        if spec.H_x is not None:
            for j in range(spec.H_x.shape[0]):
                row = np.zeros(n_z)
                row[x_off(k + 1):x_off(k + 1) + n_x] = spec.H_x[j]
                add(row, spec.h_x[j])
    if spec.H_f is not None:
        for j in range(spec.H_f.shape[0]):
            row = np.zeros(n_z)
            row[x_off(T):x_off(T) + n_x] = spec.H_f[j]
            add(row, spec.h_f[j])

    kwargs = dict(
        P=matrix(P), q=matrix(q_lin),
        A=matrix(A_eq), b=matrix(b_eq),
    )
    if G_rows:
        kwargs["G"] = matrix(np.array(G_rows))
        kwargs["h"] = matrix(np.array(h_rows))
    sol = solvers.qp(**kwargs)
    if sol["status"] != "optimal":
        raise RuntimeError(f"sparse reference solve failed: {sol['status']}")
    z = np.array(sol["x"]).reshape(-1)
    U = z[T * n_x:]
    objective = 0.5 * float(z @ (P @ z)) + float(q_lin @ z) + const
    return objective, U
