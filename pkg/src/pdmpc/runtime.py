"""Online certified control loop, closed-loop simulation, and timing.

Each step evaluates the learned primal and dual policies, computes the
duality-gap certificate from freshly condensed problem data, and applies
the learned first input only when the primal output is feasible, the dual
output is nonnegative, and the gap is at most gamma.  Any failed check
falls back to the exact embedded solver; parameters outside the sampling
box fall back without evaluating the policies, since the offline
guarantees only cover the box.  Certified steps never call the solver.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError
from .lpv_mpc import (
    LPVSystem,
    MPCSpec,
    ParameterBox,
    ParameterVector,
    step_dynamics,
)
from .policy import Policy, forward
from .qp_core import certificate_values, condense, primal_objective
from .qp_solver import SolverOptions, solve, solve_call_count

__all__ = [
    "CertifiedController",
    "StepRecord",
    "Scenario",
    "SimulationLog",
    "TimingStats",
    "certify_and_act",
    "simulate",
    "benchmark_timing",
    "make_equilibrium_scenario",
    "make_random_scenario",
    "write_step_records_csv",
    "write_step_records_jsonl",
]


def _eval_policy(pol, flat: np.ndarray) -> np.ndarray:
    if isinstance(pol, Policy):
        return forward(pol, flat)
    return np.asarray(pol(flat), dtype=float).reshape(-1)


@dataclass(frozen=True)
class CertifiedController:
    """Immutable bundle of policies, thresholds, and the problem family.

    gamma = 0 turns every step into a fallback step for inexact policies
    (useful as a pure-MPC reference mode); gamma = inf certifies every
    feasible evaluation.
    """

    system: LPVSystem
    spec: MPCSpec
    box: ParameterBox
    primal: object
    dual: object
    gamma: float = 1.0
    feasibility_tol: float = 1e-6
    solver_options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if math.isnan(self.gamma) or self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.feasibility_tol < 0:
            raise ConfigError("feasibility_tol must be nonnegative")
        n_U = self.spec.horizon * self.spec.n_u
        if isinstance(self.primal, Policy):
            if self.primal.n_in != self.box.dim or self.primal.n_out != n_U:
                raise DimensionError(
                    f"primal policy maps {self.primal.n_in}->{self.primal.n_out}, "
                    f"family needs {self.box.dim}->{n_U}"
                )
        if isinstance(self.dual, Policy) and self.dual.n_in != self.box.dim:
            raise DimensionError(
                f"dual policy input dim {self.dual.n_in} does not match "
                f"parameter dim {self.box.dim}"
            )


@dataclass
class StepRecord:
    """Full audit trail of one control step."""

    t: int
    parameter: np.ndarray
    in_box: bool
    primal_output: Optional[np.ndarray]
    dual_output: Optional[np.ndarray]
    primal_feasible: Optional[bool]
    dual_feasible: Optional[bool]
    gap: Optional[float]
    certified: bool
    applied_input: np.ndarray
    fallback: bool
    reason: Optional[str]
    solver_calls: int
    durations: dict
    audit: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "parameter": [float(v) for v in self.parameter],
            "in_box": self.in_box,
            "primal_output": None if self.primal_output is None
            else [float(v) for v in self.primal_output],
            "dual_output": None if self.dual_output is None
            else [float(v) for v in self.dual_output],
            "primal_feasible": self.primal_feasible,
            "dual_feasible": self.dual_feasible,
            "gap": self.gap,
            "certified": self.certified,
            "applied_input": [float(v) for v in self.applied_input],
            "fallback": self.fallback,
            "reason": self.reason,
            "solver_calls": self.solver_calls,
            "durations": self.durations,
            "audit": self.audit,
        }


def certify_and_act(ctrl: CertifiedController,
                    pv: ParameterVector) -> Tuple[np.ndarray, StepRecord]:
    """One certified control decision at parameter ``pv``.

    Evaluates both policies, checks primal feasibility, dual nonnegativity,
    and gap <= gamma on freshly condensed data; applies the learned first
    input on success, otherwise solves exactly and applies the solver's
    first input.  A parameter outside the sampling box skips the policy
    evaluations entirely.  A fallback solve that does not converge raises
    NumericalError.
    """
    calls0 = solve_call_count()
    durations: dict = {}
    flat = ctrl.box.layout.flatten(pv)
    in_box = ctrl.box.contains(flat)

    t0 = time.perf_counter()
    qp = condense(ctrl.system, ctrl.spec, pv)
    durations["condense"] = time.perf_counter() - t0

    U_tilde = lam_tilde = None
    feas_p = feas_d = None
    gap = None
    certified = False
    reason = None
    if in_box:
        t0 = time.perf_counter()
        U_tilde = _eval_policy(ctrl.primal, flat)
        lam_tilde = _eval_policy(ctrl.dual, flat)
        durations["policy"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        _, _, gap, p_viol, d_viol = certificate_values(qp, U_tilde, lam_tilde)
        durations["certificate"] = time.perf_counter() - t0
        feas_p = p_viol <= ctrl.feasibility_tol
        feas_d = d_viol <= ctrl.feasibility_tol
        certified = feas_p and feas_d and gap <= ctrl.gamma
        if not certified:
            if not feas_p:
                reason = "primal infeasible"
            elif not feas_d:
                reason = "dual infeasible"
            else:
                reason = "gap above threshold"
    else:
        reason = "parameter outside sampling box"

    if certified:
        u = np.array(U_tilde[:ctrl.spec.n_u])
    else:
        t0 = time.perf_counter()
        result = solve(qp, ctrl.solver_options)
        durations["solve"] = time.perf_counter() - t0
        if result.status != "optimal":
            raise NumericalError(
                f"backup solve failed with status '{result.status}' "
                f"(kkt worst {result.kkt.worst():.3e})"
            )
        u = np.array(result.U_star[:ctrl.spec.n_u])

    record = StepRecord(
        t=-1,
        parameter=flat,
        in_box=bool(in_box),
        primal_output=U_tilde,
        dual_output=lam_tilde,
        primal_feasible=feas_p,
        dual_feasible=feas_d,
        gap=gap,
        certified=certified,
        applied_input=u,
        fallback=not certified,
        reason=reason,
        solver_calls=solve_call_count() - calls0,
        durations=durations,
    )
    return u, record


@dataclass(frozen=True)
class Scenario:
    """Closed-loop inputs: initial state plus exogenous previews.

    Trajectories must cover every horizon window: with ``steps`` loop steps
    and horizon T, the scheduling/reference/disturbance trajectories need
    at least steps + T - 1 entries.
    """

    steps: int
    x0: np.ndarray
    q_traj: np.ndarray
    y_ref_traj: Optional[np.ndarray] = None
    delta_traj: Optional[np.ndarray] = None
    u_prev0: Optional[np.ndarray] = None
    abort_norm: float = 1e6

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("scenario must have at least one step")
        if self.abort_norm <= 0:
            raise ConfigError("abort_norm must be positive")


@dataclass
class SimulationLog:
    """Step records plus closed-loop outcome flags."""

    records: list
    states: np.ndarray          # (steps+1, n_x) visited states, pre-abort
    aborted: bool = False
    abort_info: Optional[dict] = None
    state_constraint_violations: int = 0

    def summary(self) -> dict:
        n = len(self.records)
        certified = [r for r in self.records if r.certified]
        fallback = [r for r in self.records if r.fallback]
        out_of_box = [r for r in self.records if not r.in_box]
        doc = {
            "steps": n,
            "certified_steps": len(certified),
            "fallback_steps": len(fallback),
            "out_of_box_steps": len(out_of_box),
            "fallback_rate": len(fallback) / n if n else 0.0,
            "max_certified_gap": max((r.gap for r in certified), default=None),
            "state_constraint_violations": self.state_constraint_violations,
            "aborted": self.aborted,
            "abort_info": self.abort_info,
        }
        audited = [r for r in self.records if r.audit is not None]
        if audited:
            cert_sub = [r.audit["true_suboptimality"] for r in audited if r.certified]
            doc["max_certified_true_suboptimality"] = max(cert_sub, default=None)
            doc["fallback_matches_oracle"] = all(
                r.audit["fallback_matches_oracle"] for r in audited if r.fallback
            )
        return doc

    def to_csv(self, path) -> None:
        write_step_records_csv(path, self.records)

    def to_jsonl(self, path) -> None:
        write_step_records_jsonl(path, self.records)


def _window(traj: Optional[np.ndarray], t: int, T: int, name: str, steps: int):
    if traj is None:
        return None
    need = steps + T - 1
    if traj.shape[0] < need:
        raise DimensionError(
            f"{name} has {traj.shape[0]} entries, scenario needs at least {need}"
        )
    return traj[t:t + T]


def simulate(ctrl: CertifiedController, scenario: Scenario,
             audit: bool = False) -> SimulationLog:
    """Roll the certified loop over a scenario with the true model.

    The previous applied input is chained into the next parameter whenever
    the family carries rate constraints, including after fallback steps.
    Frozen-scheduling families take the current scheduling point and hold
    it over the prediction window; other families consume a window of the
    scheduling trajectory.  With ``audit`` every step is additionally
    solved exactly and compared: certified steps record their true
    suboptimality, fallback steps record whether the applied input matches
    the oracle's.  The loop aborts with a diagnostic (no exception) if the
    state norm passes scenario.abort_norm.
    """
    system, spec = ctrl.system, ctrl.spec
    T = spec.horizon
    layout = ctrl.box.layout
    x = np.asarray(scenario.x0, dtype=float).reshape(system.n_x)
    if system.n_q:
        q_traj = np.asarray(scenario.q_traj, dtype=float).reshape(-1, system.n_q)
    else:
        q_traj = np.zeros((scenario.steps + T, 0))
    y_ref = (None if scenario.y_ref_traj is None
             else np.asarray(scenario.y_ref_traj, dtype=float).reshape(-1, system.n_y))
    delta = (None if scenario.delta_traj is None
             else np.asarray(scenario.delta_traj, dtype=float).reshape(-1))
    u_prev = None
    if layout.include_u_prev:
        if scenario.u_prev0 is None:
            u_prev = np.zeros(system.n_u)
        else:
            u_prev = np.asarray(scenario.u_prev0, dtype=float).reshape(system.n_u)

    records = []
    states = [x.copy()]
    aborted = False
    abort_info = None
    for t in range(scenario.steps):
        if system.frozen_scheduling and system.n_q:
            if q_traj.shape[0] < scenario.steps:
                raise DimensionError(
                    f"q_traj has {q_traj.shape[0]} entries, scenario needs "
                    f"at least {scenario.steps}"
                )
            q_win = np.tile(q_traj[t], (T, 1))
        else:
            q_win = _window(q_traj, t, T, "q_traj", scenario.steps)
        ref_win = _window(y_ref, t, T, "y_ref_traj", scenario.steps)
        delta_win = _window(delta, t, T, "delta_traj", scenario.steps)
        pv = ParameterVector(
            x0=x,
            q_seq=q_win,
            y_ref_seq=ref_win if layout.include_refs else None,
            delta_seq=delta_win if layout.include_delta else None,
            u_prev=u_prev,
        )
        u, record = certify_and_act(ctrl, pv)
        record.t = t
        if audit:
            qp = condense(system, spec, pv)
            result = solve(qp, ctrl.solver_options)
            entry = {"J_star": result.J_star, "status": result.status}
            if record.certified:
                entry["true_suboptimality"] = (
                    primal_objective(qp, record.primal_output) - result.J_star
                )
                entry["fallback_matches_oracle"] = None
            else:
                entry["true_suboptimality"] = 0.0
                entry["fallback_matches_oracle"] = bool(np.allclose(
                    u, result.U_star[:spec.n_u], atol=1e-6, rtol=0.0))
            record.audit = entry
        records.append(record)

        delta_t = float(delta_win[0]) if delta_win is not None else 0.0
        x = step_dynamics(system, x, u, q_win[0] if system.n_q else np.zeros(0), delta_t)
        states.append(x.copy())
        if u_prev is not None:
            u_prev = u
        if float(np.abs(x).max()) > scenario.abort_norm:
            aborted = True
            abort_info = {
                "t": t,
                "state_norm": float(np.abs(x).max()),
                "abort_norm": scenario.abort_norm,
                "message": "state norm passed the divergence bound",
            }
            break
    states_arr = np.array(states)
    violations = 0
    if spec.H_x is not None:
        residuals = states_arr @ spec.H_x.T - spec.h_x
        violations = int(np.sum(residuals.max(axis=1) > ctrl.feasibility_tol))
    return SimulationLog(records=records, states=states_arr,
                         aborted=aborted, abort_info=abort_info,
                         state_constraint_violations=violations)


def make_equilibrium_scenario(box: ParameterBox, steps: int,
                              abort_norm: float = 1e6) -> Scenario:
    """Origin start, zero references and disturbances, mid-range scheduling."""
    layout = box.layout
    names = layout.coordinate_names()
    mid = 0.5 * (box.lower + box.upper)
    q_coords = [i for i, nm in enumerate(names) if nm.startswith("q")
                and not nm.startswith("qf")]
    if layout.n_q:
        q_point = mid[q_coords][:layout.n_q]
        q_traj = np.tile(q_point, (steps + layout.horizon, 1))
    else:
        q_traj = np.zeros((steps + layout.horizon, 0))
    T = layout.horizon
    return Scenario(
        steps=steps,
        x0=np.zeros(layout.n_x),
        q_traj=q_traj,
        y_ref_traj=np.zeros((steps + T, layout.n_y)) if layout.include_refs else None,
        delta_traj=np.zeros(steps + T) if layout.include_delta else None,
        u_prev0=np.zeros(layout.n_u) if layout.include_u_prev else None,
        abort_norm=abort_norm,
    )


def make_random_scenario(box: ParameterBox, steps: int, seed: int,
                         abort_norm: float = 1e6) -> Scenario:
    """Scenario with every exogenous signal drawn inside the box bounds.

    The initial state uses the box's state coordinates; per-step scheduling,
    reference, and disturbance values are drawn i.i.d. within the bounds of
    the corresponding first-stage coordinates.  The closed-loop state may
    still leave the box; such steps fall back by design.
    """
    layout = box.layout
    T = layout.horizon
    rng = np.random.default_rng(seed)
    names = layout.coordinate_names()

    def coord_bounds(prefix: str, count: int):
        idx = [i for i, nm in enumerate(names) if nm.startswith(prefix)][:count]
        return box.lower[idx], box.upper[idx]

    x_lo, x_hi = coord_bounds("x0_", layout.n_x)
    x0 = rng.uniform(x_lo, x_hi)
    horizon_len = steps + T
    if layout.n_q:
        # slow random walk so the scheduling signal is physically plausible
        q_lo, q_hi = coord_bounds("q", layout.n_q)
        q_traj = np.empty((horizon_len, layout.n_q))
        q_traj[0] = rng.uniform(q_lo, q_hi)
        step_size = 0.02 * (q_hi - q_lo)
        for k in range(1, horizon_len):
            q_traj[k] = np.clip(q_traj[k - 1] + rng.uniform(-step_size, step_size),
                                q_lo, q_hi)
    else:
        q_traj = np.zeros((horizon_len, 0))
    y_ref = None
    if layout.include_refs:
        r_lo, r_hi = coord_bounds("yref0_", layout.n_y)
        y_ref = rng.uniform(r_lo, r_hi, size=(horizon_len, layout.n_y))
    delta = None
    if layout.include_delta:
        d_lo, d_hi = coord_bounds("delta_0", 1)
        delta = rng.uniform(d_lo[0], d_hi[0], size=horizon_len)
    u_prev0 = np.zeros(layout.n_u) if layout.include_u_prev else None
    return Scenario(steps=steps, x0=x0, q_traj=q_traj, y_ref_traj=y_ref,
                    delta_traj=delta, u_prev0=u_prev0, abort_norm=abort_norm)


_CSV_COLUMNS = [
    "t", "in_box", "certified", "fallback", "reason", "gap",
    "primal_feasible", "dual_feasible", "solver_calls",
    "duration_condense", "duration_policy", "duration_certificate",
    "duration_solve", "audit_J_star", "audit_true_suboptimality",
    "audit_fallback_matches_oracle",
]


def write_step_records_csv(path, records: Sequence[StepRecord]) -> None:
    """Scalar step fields as CSV; inputs and parameters appended per column."""
    n_u = records[0].applied_input.shape[0] if records else 0
    n_p = records[0].parameter.shape[0] if records else 0
    header = (_CSV_COLUMNS
              + [f"u_{j}" for j in range(n_u)]
              + [f"p_{j}" for j in range(n_p)])

    def fmt(value):
        if value is None:
            return ""
        if isinstance(value, bool):
            return str(int(value))
        if isinstance(value, float):
            return repr(value)
        return str(value)

    lines = [",".join(header)]
    for r in records:
        audit = r.audit or {}
        row = [
            r.t, r.in_box, r.certified, r.fallback, r.reason or "", r.gap,
            r.primal_feasible, r.dual_feasible, r.solver_calls,
            r.durations.get("condense"), r.durations.get("policy"),
            r.durations.get("certificate"), r.durations.get("solve"),
            audit.get("J_star"), audit.get("true_suboptimality"),
            audit.get("fallback_matches_oracle"),
        ]
        row += [float(v) for v in r.applied_input]
        row += [float(v) for v in r.parameter]
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_step_records_jsonl(path, records: Sequence[StepRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


@dataclass
class TimingStats:
    """Per-sample-median timing of the two online paths, in seconds.

    Both paths exclude the shared condensing step, which is timed
    separately: condensing produces the QP data that the solver consumes
    and that the certificate is checked against, so only the work that
    differs between the two routes is compared.  ``speedup`` is solver mean
    over policy mean.
    """

    n_samples: int
    repetitions: int
    policy: dict
    solver: dict
    condense_mean: float
    speedup: float

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "repetitions": self.repetitions,
            "policy": self.policy,
            "solver": self.solver,
            "condense_mean": self.condense_mean,
            "speedup": self.speedup,
        }

    def render_table(self) -> str:
        def us(x):
            return f"{1e6 * x:10.1f}"

        rows = [
            f"{'':8s}  {'policy+cert (us)':>18s}  {'embedded solver (us)':>20s}",
        ]
        for key in ("min", "max", "mean", "std"):
            rows.append(f"{key:8s}  {us(self.policy[key]):>18s}  {us(self.solver[key]):>20s}")
        rows.append(f"speedup (solver mean / policy mean): {self.speedup:.1f}x")
        rows.append(f"condensing, shared by both paths (us, mean): {1e6 * self.condense_mean:.1f}")
        return "\n".join(rows)


def _stats(values: np.ndarray) -> dict:
    return {
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "std": float(values.std()),
    }


def benchmark_timing(ctrl: CertifiedController, samples: Sequence[ParameterVector],
                     repetitions: int = 100, warmup: int = 5) -> TimingStats:
    """Time the certified path against the exact solver on the same samples.

    For each sample the QP is condensed once (timed separately), then the
    policy route (both forward passes plus the certificate arithmetic) and
    the solver route are each run ``warmup`` untimed and ``repetitions``
    timed times; the per-sample median enters the cross-sample statistics.
    Pure measurement: no controller state is touched.
    """
    if not samples:
        raise ConfigError("timing needs at least one sample")
    if repetitions < 1:
        raise ConfigError("repetitions must be at least 1")
    if warmup < 0:
        raise ConfigError("warmup must be nonnegative")
    policy_medians = np.empty(len(samples))
    solver_medians = np.empty(len(samples))
    condense_times = np.empty(len(samples))
    reps = np.empty(repetitions)
    for s_idx, pv in enumerate(samples):
        flat = ctrl.box.layout.flatten(pv)
        t0 = time.perf_counter()
        qp = condense(ctrl.system, ctrl.spec, pv)
        condense_times[s_idx] = time.perf_counter() - t0

        def policy_route():
            U_tilde = _eval_policy(ctrl.primal, flat)
            lam_tilde = _eval_policy(ctrl.dual, flat)
            return certificate_values(qp, U_tilde, lam_tilde)

        def solver_route():
            return solve(qp, ctrl.solver_options)

        for route, out in ((policy_route, policy_medians), (solver_route, solver_medians)):
            for _ in range(warmup):
                route()
            for r in range(repetitions):
                t0 = time.perf_counter()
                route()
                reps[r] = time.perf_counter() - t0
            out[s_idx] = float(np.median(reps))
    policy = _stats(policy_medians)
    solver = _stats(solver_medians)
    return TimingStats(
        n_samples=len(samples),
        repetitions=repetitions,
        policy=policy,
        solver=solver,
        condense_mean=float(condense_times.mean()),
        speedup=solver["mean"] / policy["mean"],
    )
