"""Problem families: scheduled linear dynamics, MPC data, parameter sampling.

A problem family couples a linear parameter-varying model with finite-horizon
MPC data (weights, constraints, optional terminal set) and a box over the
flattened problem parameter.  Two families ship built in:

* ``build_benchmark_lti`` -- a double-integrator regulation benchmark with
  state, input, and terminal-set constraints; the scheduling signal is empty.
* ``build_icc_surrogate`` -- a chassis-control surrogate (linear single-track
  plus roll dynamics) whose matrices depend nonlinearly on the vehicle speed
  through 1/v terms, with output tracking, input-rate constraints, and an
  exogenous steering preview.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

__all__ = [
    "LPVSystem",
    "MPCSpec",
    "ParameterVector",
    "ParameterLayout",
    "ParameterBox",
    "Family",
    "eval_system",
    "step_dynamics",
    "sample_parameters",
    "build_benchmark_lti",
    "build_icc_surrogate",
    "load_family_config",
    "export_parameters_csv",
]

_SYM_TOL = 1e-10


def _frozen(value, dtype=float) -> np.ndarray:
    """Copy ``value`` into a read-only float array."""
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_symmetric(mat: np.ndarray, name: str) -> None:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {mat.shape}")
    scale = max(1.0, float(np.abs(mat).max()) if mat.size else 1.0)
    if mat.size and float(np.abs(mat - mat.T).max()) > _SYM_TOL * scale:
        raise ConfigError(f"{name} is not symmetric within tolerance")


def _check_psd(mat: np.ndarray, name: str) -> None:
    _check_symmetric(mat, name)
    if mat.size == 0:
        return
    eigs = np.linalg.eigvalsh(mat)
    scale = max(1.0, float(np.abs(mat).max()))
    if eigs.min() < -1e-8 * scale:
        raise ConfigError(f"{name} is not positive semidefinite (min eig {eigs.min():.3e})")


def _check_pd(mat: np.ndarray, name: str) -> None:
    _check_symmetric(mat, name)
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConfigError(f"{name} must be positive definite") from None


def _check_polytope(H: Optional[np.ndarray], h: Optional[np.ndarray], dim: int, name: str) -> None:
    if H is None and h is None:
        return
    if H is None or h is None:
        raise ConfigError(f"constraint '{name}' needs both a matrix and a right-hand side")
    if H.ndim != 2 or H.shape[1] != dim:
        raise DimensionError(f"constraint '{name}': matrix shape {H.shape} does not match dimension {dim}")
    if h.shape != (H.shape[0],):
        raise DimensionError(f"constraint '{name}': right-hand side shape {h.shape} does not match {H.shape[0]} rows")
    # Nonemptiness is checked against the origin witness; the built-in
    # families only use origin-centred boxes, so this is not restrictive.
    if H.shape[0] and float(h.min()) < 0.0:
        raise ConfigError(f"constraint '{name}' does not contain the origin witness point")


@dataclass(frozen=True, eq=False)
class LPVSystem:
    """Discrete-time linear parameter-varying model.

    ``dynamics_map`` maps a scheduling vector ``q`` (shape ``(n_q,)``) to the
    triple ``(A, B, e_dir)`` where ``e_dir`` is the direction through which the
    scalar exogenous input enters: ``x+ = A x + B u + e_dir * delta``.

    Parameters
    ----------
    n_x, n_u, n_q : int
        State, input, and scheduling dimensions.  ``n_q`` may be zero.
    dynamics_map : callable
        Evaluates the system matrices at a scheduling point.
    q_lower, q_upper : ndarray, shape (n_q,)
        Declared scheduling range; evaluation outside it is a domain error.
    output_map : ndarray or None
        Optional output matrix ``C`` of shape ``(n_y, n_x)``.
    has_exogenous : bool
        Whether the scalar exogenous channel is active for this family.
    frozen_scheduling : bool
        If set, one scheduling value is held over the whole prediction
        horizon and the flattened parameter stores it once.
    """

    n_x: int
    n_u: int
    n_q: int
    dynamics_map: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]
    q_lower: np.ndarray
    q_upper: np.ndarray
    output_map: Optional[np.ndarray] = None
    has_exogenous: bool = False
    frozen_scheduling: bool = False
    name: str = "lpv"

    def __post_init__(self):
        for dim_name in ("n_x", "n_u", "n_q"):
            if getattr(self, dim_name) < 0:
                raise ConfigError(f"{dim_name} must be nonnegative")
        if self.n_x == 0 or self.n_u == 0:
            raise ConfigError("state and input dimensions must be positive")
        object.__setattr__(self, "q_lower", _frozen(self.q_lower).reshape(self.n_q))
        object.__setattr__(self, "q_upper", _frozen(self.q_upper).reshape(self.n_q))
        if np.any(self.q_lower > self.q_upper):
            raise ConfigError("scheduling range has lower > upper")
        if self.output_map is not None:
            C = _frozen(self.output_map)
            if C.ndim != 2 or C.shape[1] != self.n_x:
                raise DimensionError(f"output map shape {C.shape} does not match n_x={self.n_x}")
            object.__setattr__(self, "output_map", C)

    @property
    def n_y(self) -> int:
        return self.output_map.shape[0] if self.output_map is not None else self.n_x


@dataclass(frozen=True, eq=False)
class MPCSpec:
    """Finite-horizon MPC data: weights, polytopic constraints, terminal set.

    The stage cost is ``x'Qx + u'Ru`` in regulation mode or
    ``(Cx - y_ref)'Q(Cx - y_ref) + u'Ru`` when ``tracking`` is set; the
    terminal cost is ``x_T' Q_f x_T``.  Constraints are ``H_u u <= h_u`` on
    inputs, ``H_x x <= h_x`` on the predicted states ``x_1 .. x_T``,
    ``|u_k - u_{k-1}| <= du_max`` on input rates (chained to the previous
    applied input), and ``H_f x_T <= h_f`` for the terminal set.
    """

    horizon: int
    Q: np.ndarray
    R: np.ndarray
    Q_f: np.ndarray
    H_u: np.ndarray
    h_u: np.ndarray
    H_x: Optional[np.ndarray] = None
    h_x: Optional[np.ndarray] = None
    du_max: Optional[np.ndarray] = None
    H_f: Optional[np.ndarray] = None
    h_f: Optional[np.ndarray] = None
    tracking: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        for fname in ("Q", "R", "Q_f", "H_u", "h_u", "H_x", "h_x", "du_max", "H_f", "h_f"):
            val = getattr(self, fname)
            if val is not None:
                object.__setattr__(self, fname, _frozen(val))
        _check_psd(self.Q, "Q")
        _check_pd(self.R, "R")
        _check_psd(self.Q_f, "Q_f")
        n_u = self.R.shape[0]
        _check_polytope(self.H_u, self.h_u, n_u, "input")
        _check_polytope(self.H_x, self.h_x, self.Q_f.shape[0], "state")
        _check_polytope(self.H_f, self.h_f, self.Q_f.shape[0], "terminal")
        if self.du_max is not None:
            if self.du_max.shape != (n_u,):
                raise DimensionError(f"du_max shape {self.du_max.shape} does not match n_u={n_u}")
            if np.any(self.du_max < 0):
                raise ConfigError("du_max must be nonnegative")

    @property
    def n_u(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Structured problem parameter for one MPC instance.

    Fields
    ------
    x0 : ndarray, shape (n_x,)
        Current state.
    q_seq : ndarray, shape (T, n_q)
        Scheduling values over the horizon (identical rows when the family
        freezes the scheduling signal).
    y_ref_seq : ndarray, shape (T, n_y) or None
        Output reference preview (tracking families).
    delta_seq : ndarray, shape (T,) or None
        Exogenous input preview.
    u_prev : ndarray, shape (n_u,) or None
        Previously applied input, referenced by the rate constraints.
    """

    x0: np.ndarray
    q_seq: np.ndarray
    y_ref_seq: Optional[np.ndarray] = None
    delta_seq: Optional[np.ndarray] = None
    u_prev: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(self.x0))
        object.__setattr__(self, "q_seq", _frozen(np.atleast_2d(self.q_seq)))
        for fname in ("y_ref_seq", "delta_seq", "u_prev"):
            val = getattr(self, fname)
            if val is not None:
                object.__setattr__(self, fname, _frozen(val))
        for fname in ("x0", "q_seq", "y_ref_seq", "delta_seq", "u_prev"):
            val = getattr(self, fname)
            if val is not None and val.size and not np.all(np.isfinite(val)):
                raise DomainError(f"parameter field '{fname}' contains non-finite entries")


@dataclass(frozen=True)
class ParameterLayout:
    """Flattening convention between ParameterVector and a plain vector.

    Coordinate order: current state, scheduling (one copy when frozen over
    the horizon, otherwise one copy per step), output references step by
    step, exogenous preview, previous input.
    """

    n_x: int
    horizon: int
    n_q: int
    n_y: int
    n_u: int
    frozen_scheduling: bool = False
    include_refs: bool = False
    include_delta: bool = False
    include_u_prev: bool = False

    @classmethod
    def for_problem(cls, system: LPVSystem, spec: MPCSpec) -> "ParameterLayout":
        return cls(
            n_x=system.n_x,
            horizon=spec.horizon,
            n_q=system.n_q,
            n_y=system.n_y,
            n_u=system.n_u,
            frozen_scheduling=system.frozen_scheduling,
            include_refs=spec.tracking,
            include_delta=system.has_exogenous,
            include_u_prev=spec.du_max is not None,
        )

    @property
    def q_entries(self) -> int:
        if self.n_q == 0:
            return 0
        return self.n_q if self.frozen_scheduling else self.horizon * self.n_q

    @property
    def dim(self) -> int:
        d = self.n_x + self.q_entries
        if self.include_refs:
            d += self.horizon * self.n_y
        if self.include_delta:
            d += self.horizon
        if self.include_u_prev:
            d += self.n_u
        return d

    def coordinate_names(self) -> list[str]:
        names = [f"x0_{i}" for i in range(self.n_x)]
        if self.n_q:
            if self.frozen_scheduling:
                names += [f"q_{j}" for j in range(self.n_q)]
            else:
                names += [f"q{k}_{j}" for k in range(self.horizon) for j in range(self.n_q)]
        if self.include_refs:
            names += [f"yref{k}_{j}" for k in range(self.horizon) for j in range(self.n_y)]
        if self.include_delta:
            names += [f"delta_{k}" for k in range(self.horizon)]
        if self.include_u_prev:
            names += [f"uprev_{j}" for j in range(self.n_u)]
        return names

    def flatten(self, pv: ParameterVector) -> np.ndarray:
        T = self.horizon
        parts = [np.asarray(pv.x0, dtype=float).reshape(self.n_x)]
        q = np.asarray(pv.q_seq, dtype=float).reshape(T, self.n_q)
        if self.n_q:
            if self.frozen_scheduling:
                if not np.all(q == q[0]):
                    raise DomainError("scheduling sequence must be constant for this family")
                parts.append(q[0])
            else:
                parts.append(q.ravel())
        if self.include_refs:
            if pv.y_ref_seq is None:
                raise DimensionError("parameter is missing the output reference preview")
            parts.append(np.asarray(pv.y_ref_seq, dtype=float).reshape(T * self.n_y))
        if self.include_delta:
            if pv.delta_seq is None:
                raise DimensionError("parameter is missing the exogenous preview")
            parts.append(np.asarray(pv.delta_seq, dtype=float).reshape(T))
        if self.include_u_prev:
            if pv.u_prev is None:
                raise DimensionError("parameter is missing the previous input")
            parts.append(np.asarray(pv.u_prev, dtype=float).reshape(self.n_u))
        flat = np.concatenate(parts) if parts else np.zeros(0)
        if flat.shape != (self.dim,):
            raise DimensionError(f"flattened parameter has dim {flat.shape[0]}, layout expects {self.dim}")
        return flat

    def unflatten(self, vec: np.ndarray) -> ParameterVector:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.shape != (self.dim,):
            raise DimensionError(f"parameter vector has dim {vec.shape[0]}, layout expects {self.dim}")
        T = self.horizon
        pos = 0

        def take(n):
            nonlocal pos
            out = vec[pos:pos + n]
            pos += n
            return out

        x0 = take(self.n_x)
        if self.n_q == 0:
            q_seq = np.zeros((T, 0))
        elif self.frozen_scheduling:
            q_seq = np.tile(take(self.n_q), (T, 1))
        else:
            q_seq = take(T * self.n_q).reshape(T, self.n_q)
        y_ref = take(T * self.n_y).reshape(T, self.n_y) if self.include_refs else None
        delta = take(T) if self.include_delta else None
        u_prev = take(self.n_u) if self.include_u_prev else None
        return ParameterVector(x0=x0, q_seq=q_seq, y_ref_seq=y_ref, delta_seq=delta, u_prev=u_prev)


@dataclass(frozen=True, eq=False)
class ParameterBox:
    """Axis-aligned box over the flattened parameter with a sampling law."""

    lower: np.ndarray
    upper: np.ndarray
    layout: ParameterLayout
    distribution: str = "uniform"

    def __post_init__(self):
        lower = _frozen(self.lower).reshape(-1)
        upper = _frozen(self.upper).reshape(-1)
        if lower.shape != upper.shape:
            raise DimensionError("box bounds have mismatched shapes")
        if lower.shape != (self.layout.dim,):
            raise DimensionError(f"box dimension {lower.shape[0]} does not match layout dim {self.layout.dim}")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ConfigError("box bounds must be finite")
        if np.any(lower > upper):
            raise ConfigError("box has lower > upper in some coordinate")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, flat: np.ndarray, tol: float = 0.0) -> bool:
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.shape != (self.dim,):
            raise DimensionError(f"point dim {flat.shape[0]} does not match box dim {self.dim}")
        return bool(np.all(flat >= self.lower - tol) and np.all(flat <= self.upper + tol))


class Family(NamedTuple):
    """Convenience bundle of a model and its MPC data."""

    system: LPVSystem
    spec: MPCSpec


def eval_system(system: LPVSystem, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate (A, B, e_dir) at a scheduling point inside the declared range."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (system.n_q,):
        raise DimensionError(f"scheduling point has dim {q.shape[0]}, system declares n_q={system.n_q}")
    if system.n_q:
        below = q < system.q_lower
        above = q > system.q_upper
        if np.any(below) or np.any(above):
            bad = int(np.argmax(below | above))
            raise DomainError(
                f"scheduling coordinate {bad} = {q[bad]:g} outside declared range "
                f"[{system.q_lower[bad]:g}, {system.q_upper[bad]:g}]"
            )
    A, B, e_dir = system.dynamics_map(q)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    e_dir = np.asarray(e_dir, dtype=float).reshape(-1)
    if A.shape != (system.n_x, system.n_x) or B.shape != (system.n_x, system.n_u) or e_dir.shape != (system.n_x,):
        raise DimensionError("dynamics map returned matrices with inconsistent shapes")
    return A, B, e_dir


def step_dynamics(system: LPVSystem, x: np.ndarray, u: np.ndarray, q: np.ndarray,
                  delta: float = 0.0) -> np.ndarray:
    """One step of the model: ``A(q) x + B(q) u + e_dir(q) * delta``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (system.n_x,):
        raise DimensionError(f"state has dim {x.shape[0]}, expected {system.n_x}")
    if u.shape != (system.n_u,):
        raise DimensionError(f"input has dim {u.shape[0]}, expected {system.n_u}")
    A, B, e_dir = eval_system(system, q)
    return A @ x + B @ u + e_dir * float(delta)


def sample_parameters(box: ParameterBox, n: int, seed: int) -> list[ParameterVector]:
    """Draw ``n`` i.i.d. parameters from the box (uniform coordinates).

    Draws are reproducible for a given seed and are returned in draw order.
    """
    if n < 0:
        raise ConfigError("sample count must be nonnegative")
    if box.distribution != "uniform":
        raise ConfigError(f"unsupported sampling distribution '{box.distribution}'")
    rng = np.random.default_rng(seed)
    flat = rng.uniform(box.lower, box.upper, size=(n, box.dim))
    return [box.layout.unflatten(row) for row in flat]


def export_parameters_csv(path, samples: Sequence[ParameterVector], layout: ParameterLayout) -> None:
    """Write flattened parameter samples to CSV, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(layout.coordinate_names())
        for pv in samples:
            writer.writerow([repr(float(v)) for v in layout.flatten(pv)])


# ---------------------------------------------------------------------------
# Built-in families
# ---------------------------------------------------------------------------

def _merge_config(defaults: dict, config: Optional[dict], name: str) -> dict:
    merged = dict(defaults)
    if config:
        unknown = set(config) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
        merged.update(config)
    return merged


_BENCHMARK_DEFAULTS = {
    "ts": 0.1,
    "horizon": 3,
    "q_weight": (1.0, 1.0),
    "r_weight": (0.5,),
    "qf_weight": (1.0, 1.0),
    "u_max": 2.0,
    "x_max": (5.0, 5.0),
    "terminal_bound": (4.0, 4.0),
    "sample_bound": (2.5, 2.5),
    "with_terminal": True,
    "du_max": None,        # scalar enables input-rate constraints
    "u_prev_bound": 2.0,   # u_prev sampling range when du_max is set
}


def build_benchmark_lti(config: Optional[dict] = None) -> Tuple[LPVSystem, MPCSpec, ParameterBox]:
    """Double-integrator regulation benchmark with a box terminal set.

    The model is time invariant; the scheduling dimension is zero and the
    only problem parameter is the current state, sampled uniformly from
    ``[-sample_bound, sample_bound]``.
    """
    cfg = _merge_config(_BENCHMARK_DEFAULTS, config, "benchmark")
    ts = float(cfg["ts"])
    if ts <= 0:
        raise ConfigError("ts must be positive")
    T = int(cfg["horizon"])
    A = np.array([[1.0, ts], [0.0, 1.0]])
    B = np.array([[0.0], [ts]])
    e_dir = np.zeros(2)

    def dynamics_map(q):
        return A, B, e_dir

    system = LPVSystem(
        n_x=2, n_u=1, n_q=0,
        dynamics_map=dynamics_map,
        q_lower=np.zeros(0), q_upper=np.zeros(0),
        name="benchmark_lti",
    )

    u_max = float(cfg["u_max"])
    x_max = np.asarray(cfg["x_max"], dtype=float).reshape(2)
    if u_max <= 0 or np.any(x_max <= 0):
        raise ConfigError("constraint bounds must be positive")
    H_box = np.vstack([np.eye(2), -np.eye(2)])
    spec_kwargs = dict(
        horizon=T,
        Q=np.diag(np.asarray(cfg["q_weight"], dtype=float).reshape(2)),
        R=np.diag(np.asarray(cfg["r_weight"], dtype=float).reshape(1)),
        Q_f=np.diag(np.asarray(cfg["qf_weight"], dtype=float).reshape(2)),
        H_u=np.array([[1.0], [-1.0]]),
        h_u=np.array([u_max, u_max]),
        H_x=H_box,
        h_x=np.concatenate([x_max, x_max]),
    )
    if cfg["with_terminal"]:
        terminal = np.asarray(cfg["terminal_bound"], dtype=float).reshape(2)
        if np.any(terminal <= 0):
            raise ConfigError("terminal bounds must be positive")
        spec_kwargs["H_f"] = H_box
        spec_kwargs["h_f"] = np.concatenate([terminal, terminal])
    if cfg["du_max"] is not None:
        spec_kwargs["du_max"] = np.array([float(cfg["du_max"])])
    spec = MPCSpec(**spec_kwargs)

    layout = ParameterLayout.for_problem(system, spec)
    bound = np.asarray(cfg["sample_bound"], dtype=float).reshape(2)
    lower, upper = -bound, bound
    if cfg["du_max"] is not None:
        u_prev_bound = float(cfg["u_prev_bound"])
        if u_prev_bound <= 0 or u_prev_bound > u_max:
            raise ConfigError("u_prev_bound must lie in (0, u_max]")
        lower = np.concatenate([lower, [-u_prev_bound]])
        upper = np.concatenate([upper, [u_prev_bound]])
    box = ParameterBox(lower=lower, upper=upper, layout=layout)
    return system, spec, box


_ICC_DEFAULTS = {
    "ts": 0.05,
    "horizon": 3,
    "speed_range": (5.0, 40.0),
    "mass": 1500.0,          # kg
    "yaw_inertia": 2500.0,   # kg m^2
    "roll_inertia": 600.0,   # kg m^2
    "cornering_front": 8.0e4,  # N/rad
    "cornering_rear": 9.0e4,   # N/rad
    "lf": 1.2,               # m, CG to front axle
    "lr": 1.4,               # m, CG to rear axle
    "roll_height": 0.55,     # m, CG height over roll axis
    "roll_stiffness": 6.0e4,  # N m/rad
    "roll_damping": 5.0e3,    # N m s/rad
    "q_weight": (40.0, 40.0, 40.0),
    "r_weight": (0.4, 0.4, 0.4),
    "u_max": (12.0, 12.0, 12.0),   # kN m, kN m, kN
    "du_max": (9.0, 9.0, 9.0),
    "speed_box": (8.0, 35.0),
    "state_box": (0.08, 0.35, 0.08, 0.35),
    "ref_box": (0.03, 0.2, 0.03),
    "delta_box": 0.05,
    "u_prev_box": (2.5, 2.5, 2.5),
}


def build_icc_surrogate(config: Optional[dict] = None) -> Tuple[LPVSystem, MPCSpec, ParameterBox]:
    """Chassis-control surrogate: single-track plus roll, scheduled on speed.

    States are sideslip, yaw rate, roll angle, roll rate; inputs are yaw
    moment, roll moment (kN m) and lateral force (kN); the exogenous input is
    the driver steering angle.  Speed enters A, B, e_dir through 1/v terms
    and is held constant over the prediction horizon.  Tracked outputs are
    sideslip, yaw rate, and roll angle.  Forward-Euler discretization.
    """
    cfg = _merge_config(_ICC_DEFAULTS, config, "icc")
    ts = float(cfg["ts"])
    if ts <= 0:
        raise ConfigError("ts must be positive")
    v_lo, v_hi = (float(v) for v in cfg["speed_range"])
    if v_lo <= 0.0 or v_hi <= 0.0:
        raise ConfigError("speed range must exclude zero (1/v terms are singular)")
    if v_lo > v_hi:
        raise ConfigError("speed range has lower > upper")

    m = float(cfg["mass"])
    iz = float(cfg["yaw_inertia"])
    ix = float(cfg["roll_inertia"])
    cf = float(cfg["cornering_front"])
    cr = float(cfg["cornering_rear"])
    lf = float(cfg["lf"])
    lr = float(cfg["lr"])
    h = float(cfg["roll_height"])
    k_roll = float(cfg["roll_stiffness"])
    d_roll = float(cfg["roll_damping"])
    kilo = 1.0e3  # inputs expressed in kN / kN m

    def dynamics_map(q):
        v = float(q[0])
        a_c = np.array([
            [-(cf + cr) / (m * v), (cr * lr - cf * lf) / (m * v * v) - 1.0, 0.0, 0.0],
            [(cr * lr - cf * lf) / iz, -(cf * lf * lf + cr * lr * lr) / (iz * v), 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [-h * (cf + cr) / ix, h * (cr * lr - cf * lf) / (ix * v), -k_roll / ix, -d_roll / ix],
        ])
        b_c = np.array([
            [0.0, 0.0, kilo / (m * v)],
            [kilo / iz, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, kilo / ix, kilo * h / ix],
        ])
        e_c = np.array([cf / (m * v), cf * lf / iz, 0.0, h * cf / ix])
        return np.eye(4) + ts * a_c, ts * b_c, ts * e_c

    system = LPVSystem(
        n_x=4, n_u=3, n_q=1,
        dynamics_map=dynamics_map,
        q_lower=np.array([v_lo]), q_upper=np.array([v_hi]),
        output_map=np.array([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]),
        has_exogenous=True,
        frozen_scheduling=True,
        name="icc_surrogate",
    )

    T = int(cfg["horizon"])
    u_max = np.asarray(cfg["u_max"], dtype=float).reshape(3)
    du_max = np.asarray(cfg["du_max"], dtype=float).reshape(3)
    if np.any(u_max <= 0) or np.any(du_max <= 0):
        raise ConfigError("input and rate bounds must be positive")
    spec = MPCSpec(
        horizon=T,
        Q=np.diag(np.asarray(cfg["q_weight"], dtype=float).reshape(3)),
        R=np.diag(np.asarray(cfg["r_weight"], dtype=float).reshape(3)),
        Q_f=np.zeros((4, 4)),
        H_u=np.vstack([np.eye(3), -np.eye(3)]),
        h_u=np.concatenate([u_max, u_max]),
        du_max=du_max,
        tracking=True,
    )

    layout = ParameterLayout.for_problem(system, spec)
    sb_lo, sb_hi = (float(v) for v in cfg["speed_box"])
    if sb_lo < v_lo or sb_hi > v_hi:
        raise ConfigError("speed sampling box exceeds the declared speed range")
    state_box = np.asarray(cfg["state_box"], dtype=float).reshape(4)
    ref_box = np.asarray(cfg["ref_box"], dtype=float).reshape(3)
    delta_box = float(cfg["delta_box"])
    u_prev_box = np.asarray(cfg["u_prev_box"], dtype=float).reshape(3)
    if np.any(u_prev_box > u_max):
        raise ConfigError("u_prev sampling box must lie inside the input bounds")
    lower = np.concatenate([
        -state_box, [sb_lo], np.tile(-ref_box, T), np.full(T, -delta_box), -u_prev_box,
    ])
    upper = np.concatenate([
        state_box, [sb_hi], np.tile(ref_box, T), np.full(T, delta_box), u_prev_box,
    ])
    box = ParameterBox(lower=lower, upper=upper, layout=layout)
    return system, spec, box


_FAMILY_BUILDERS = {
    "benchmark": build_benchmark_lti,
    "icc_surrogate": build_icc_surrogate,
}


def load_family_config(source) -> Tuple[LPVSystem, MPCSpec, ParameterBox]:
    """Build a family from a dict or a JSON file path.

    The dict holds a ``family`` key naming a builder (``benchmark`` or
    ``icc_surrogate``); all other keys are passed through as builder config.
    """
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            source = json.load(fh)
    if not isinstance(source, dict):
        raise ConfigError("family config must be a dict or a path to a JSON file")
    cfg = dict(source)
    name = cfg.pop("family", None)
    if name not in _FAMILY_BUILDERS:
        raise ConfigError(f"unknown family '{name}'; available: {sorted(_FAMILY_BUILDERS)}")
    return _FAMILY_BUILDERS[name](cfg or None)
