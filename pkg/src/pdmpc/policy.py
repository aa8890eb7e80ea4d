"""Learned policies: plain-numpy ReLU networks, datasets, and training.

The primal policy regresses the stacked optimal input sequence U*(P); the
dual policy regresses the optimal multipliers lam*(P) and carries an
elementwise nonnegative clamp on its output so dual feasibility holds by
construction.  Training minimizes the mean squared error in standardized
coordinates with an Adam-style optimizer; the clamp is applied at inference
only (projecting onto the nonnegative orthant never increases the distance
to nonnegative targets).

Everything here is deterministic for a fixed seed: weight initialization,
data splits, batch order, and the resulting policy file bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, PolicyFormatError
from .lpv_mpc import LPVSystem, MPCSpec, ParameterBox
from .qp_core import condense
from .qp_solver import SolverOptions, solve

__all__ = [
    "Dataset",
    "TrainConfig",
    "Policy",
    "GradCheckResult",
    "generate_dataset",
    "train",
    "forward",
    "forward_batch",
    "grad_check",
    "policy_to_json",
    "save_policy",
    "load_policy",
    "POLICY_FORMAT",
    "POLICY_FORMAT_VERSION",
]

POLICY_FORMAT = "pdmpc-policy"
POLICY_FORMAT_VERSION = 1

# Standardization guards.  Constant input coordinates get unit scale so that
# evaluation away from the training value stays bounded; constant output
# coordinates get a tiny scale so the prediction is pinned to the constant.
_IN_SCALE_FLOOR = 1.0
_OUT_SCALE_FLOOR = 1e-9


@dataclass(eq=False)
class Dataset:
    """Labelled samples: parameters, primal and dual optima, optimal values."""

    P: np.ndarray
    U: np.ndarray
    lam: np.ndarray
    J: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        U = np.array(self.U, dtype=float)
        lam = np.array(self.lam, dtype=float)
        J = np.array(self.J, dtype=float).reshape(-1)
        M = P.shape[0]
        if P.ndim != 2 or U.ndim != 2 or lam.ndim != 2:
            raise DimensionError("dataset arrays must be two-dimensional")
        if U.shape[0] != M or lam.shape[0] != M or J.shape[0] != M:
            raise DimensionError("dataset arrays disagree on the sample count")
        for name, arr in (("P", P), ("U", U), ("lam", lam), ("J", J)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise NumericalError(f"dataset array '{name}' contains non-finite entries")
            arr.setflags(write=False)
        self.P, self.U, self.lam, self.J = P, U, lam, J

    def __len__(self) -> int:
        return self.P.shape[0]

    def to_csv(self, path) -> None:
        """Write one row per sample: parameters, U*, lam*, J*."""
        d, n, m = self.P.shape[1], self.U.shape[1], self.lam.shape[1]
        header = ([f"p_{i}" for i in range(d)] + [f"ustar_{i}" for i in range(n)]
                  + [f"lamstar_{i}" for i in range(m)] + ["jstar"])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(len(self)):
                row = np.concatenate([self.P[i], self.U[i], self.lam[i], [self.J[i]]])
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, provenance: Optional[dict] = None) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader]
        d = sum(1 for name in header if name.startswith("p_"))
        n = sum(1 for name in header if name.startswith("ustar_"))
        m = sum(1 for name in header if name.startswith("lamstar_"))
        if header != ([f"p_{i}" for i in range(d)] + [f"ustar_{i}" for i in range(n)]
                      + [f"lamstar_{i}" for i in range(m)] + ["jstar"]):
            raise ConfigError(f"unrecognized dataset header in {path}")
        data = np.array(rows, dtype=float).reshape(len(rows), d + n + m + 1)
        return cls(P=data[:, :d], U=data[:, d:d + n], lam=data[:, d + n:d + n + m],
                   J=data[:, -1], provenance=provenance or {})


def generate_dataset(system: LPVSystem, spec: MPCSpec, box: ParameterBox, n: int,
                     seed: int, solver_options: Optional[SolverOptions] = None,
                     max_failure_ratio: float = 0.5) -> Dataset:
    """Sample the box and solve each instance exactly to label it.

    Samples whose solve does not reach optimal status (or whose KKT
    residuals fail the label-quality gate) are resampled and counted; the
    generation aborts once the failure ratio exceeds ``max_failure_ratio``.
    """
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    opts = solver_options or SolverOptions()
    label_gate = 10.0 * opts.tolerance
    rng = np.random.default_rng(seed)
    P_rows, U_rows, lam_rows, J_rows = [], [], [], []
    failures = 0
    attempts = 0
    while len(P_rows) < n:
        attempts += 1
        flat = rng.uniform(box.lower, box.upper)
        pv = box.layout.unflatten(flat)
        qp = condense(system, spec, pv)
        result = solve(qp, opts)
        if result.status != "optimal" or result.kkt.worst() > label_gate:
            failures += 1
            if attempts >= 20 and failures > max_failure_ratio * attempts:
                raise NumericalError(
                    f"dataset generation aborted: {failures}/{attempts} solves failed "
                    f"(status gate + KKT gate at {label_gate:g})"
                )
            continue
        P_rows.append(flat)
        U_rows.append(result.U_star)
        lam_rows.append(result.lambda_star)
        J_rows.append(result.J_star)
    return Dataset(
        P=np.array(P_rows), U=np.array(U_rows), lam=np.array(lam_rows), J=np.array(J_rows),
        provenance={
            "family": system.name,
            "n": n,
            "seed": seed,
            "solver_tolerance": opts.tolerance,
            "resampled": failures,
            "attempts": attempts,
        },
    )


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings (defaults are the documented ones)."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 2000
    patience: int = 200
    validation_fraction: float = 0.1
    seed: int = 0
    clamp_nonnegative: Optional[bool] = None  # None: clamp iff target is dual

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("learning rate, batch size, and epochs must be positive")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ConfigError("validation fraction must lie in [0, 1)")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("Adam decay rates must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class Policy:
    """Feedforward ReLU network with input/output standardization.

    ``widths`` lists all layer sizes including input and output.  The
    optional output clamp maps the denormalized output through max(., 0).
    """

    widths: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_shift: np.ndarray
    output_scale: np.ndarray
    clamp_nonnegative: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError(f"invalid layer widths {widths}")
        n_layers = len(widths) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise DimensionError("layer count does not match widths")
        Ws, bs = [], []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.array(W, dtype=float)
            b = np.array(b, dtype=float).reshape(-1)
            if W.shape != (widths[l + 1], widths[l]) or b.shape != (widths[l + 1],):
                raise DimensionError(f"layer {l}: shapes {W.shape}/{b.shape} do not match widths")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericalError(f"layer {l} has non-finite parameters")
            W.setflags(write=False)
            b.setflags(write=False)
            Ws.append(W)
            bs.append(b)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "weights", tuple(Ws))
        object.__setattr__(self, "biases", tuple(bs))
        for name, dim in (("input_shift", widths[0]), ("input_scale", widths[0]),
                          ("output_shift", widths[-1]), ("output_scale", widths[-1])):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (dim,):
                raise DimensionError(f"{name} has dim {arr.shape[0]}, expected {dim}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.input_scale <= 0) or np.any(self.output_scale <= 0):
            raise ConfigError("standardization scales must be positive")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def theta(self) -> np.ndarray:
        """Flattened parameter vector (weights then bias, layer by layer)."""
        return np.concatenate([np.concatenate([W.ravel(), b])
                               for W, b in zip(self.weights, self.biases)])

    def with_theta(self, theta: np.ndarray) -> "Policy":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        Ws, bs = [], []
        pos = 0
        for l in range(len(self.widths) - 1):
            n_out, n_in = self.widths[l + 1], self.widths[l]
            Ws.append(theta[pos:pos + n_out * n_in].reshape(n_out, n_in))
            pos += n_out * n_in
            bs.append(theta[pos:pos + n_out])
            pos += n_out
        if pos != theta.shape[0]:
            raise DimensionError("theta length does not match the architecture")
        return replace(self, weights=tuple(Ws), biases=tuple(bs))


def _net_forward(Ws, bs, Z):
    """Network pass on standardized input; returns activations and
    pre-activations for backprop."""
    acts = [Z]
    pres = []
    a = Z
    last = len(Ws) - 1
    for l, (W, b) in enumerate(zip(Ws, bs)):
        pre = a @ W.T + b
        pres.append(pre)
        a = pre if l == last else np.maximum(pre, 0.0)
        acts.append(a)
    return acts, pres


def _net_loss_grads(Ws, bs, Z, T):
    """Mean squared error in standardized coordinates plus parameter grads."""
    acts, pres = _net_forward(Ws, bs, Z)
    diff = acts[-1] - T
    loss = float((diff * diff).mean())
    g = (2.0 / diff.size) * diff
    grads_W = [None] * len(Ws)
    grads_b = [None] * len(Ws)
    for l in range(len(Ws) - 1, -1, -1):
        grads_W[l] = g.T @ acts[l]
        grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ Ws[l]) * (pres[l - 1] > 0.0)
    return loss, grads_W, grads_b


def _forward_raw(pol: Policy, X: np.ndarray):
    Z = (X - pol.input_shift) / pol.input_scale
    return _net_forward(pol.weights, pol.biases, Z)


def forward_batch(pol: Policy, X: np.ndarray) -> np.ndarray:
    """Evaluate the policy on a batch of flattened parameters (B, n_in)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != pol.n_in:
        raise DimensionError(f"batch shape {X.shape} does not match input dim {pol.n_in}")
    acts, _ = _forward_raw(pol, X)
    out = pol.output_shift + pol.output_scale * acts[-1]
    if pol.clamp_nonnegative:
        out = np.maximum(out, 0.0)
    return out


def forward(pol: Policy, P: np.ndarray) -> np.ndarray:
    """Evaluate the policy at one flattened parameter vector.

    Dedicated vector path (matrix-vector products only) so the online
    certified route stays cheap; numerically it matches ``forward_batch``
    up to BLAS accumulation order.
    """
    P = np.asarray(P, dtype=float).reshape(-1)
    if P.shape != (pol.n_in,):
        raise DimensionError(f"parameter dim {P.shape[0]} does not match input dim {pol.n_in}")
    z = (P - pol.input_shift) / pol.input_scale
    last = len(pol.weights) - 1
    for l in range(last):
        z = pol.weights[l] @ z + pol.biases[l]
        np.maximum(z, 0.0, out=z)
    z = pol.weights[last] @ z + pol.biases[last]
    out = pol.output_shift + pol.output_scale * z
    if pol.clamp_nonnegative:
        np.maximum(out, 0.0, out=out)
    return out


def _loss_and_grads(pol: Policy, X: np.ndarray, T: np.ndarray):
    Z = (X - pol.input_shift) / pol.input_scale
    return _net_loss_grads(pol.weights, pol.biases, Z, T)


def _normalize_targets(pol: Policy, Y: np.ndarray) -> np.ndarray:
    return (Y - pol.output_shift) / pol.output_scale


def _standardization(arr: np.ndarray, floor: float):
    shift = arr.mean(axis=0)
    std = arr.std(axis=0)
    guard = std <= 1e-9 * (1.0 + np.abs(shift))
    scale = np.where(guard, floor, std)
    return shift, scale


def _init_layers(widths, rng):
    Ws, bs = [], []
    last = len(widths) - 2
    for l in range(len(widths) - 1):
        fan_in = widths[l]
        std = np.sqrt(1.0 / fan_in) if l == last else np.sqrt(2.0 / fan_in)
        Ws.append(rng.standard_normal((widths[l + 1], widths[l])) * std)
        bs.append(np.zeros(widths[l + 1]))
    return Ws, bs


def train(data: Dataset, target: str, widths: Sequence[int],
          cfg: Optional[TrainConfig] = None) -> Policy:
    """Fit a policy to the dataset by Adam on standardized squared error.

    ``target`` selects the labels: ``"primal"`` regresses U*, ``"dual"``
    regresses lam* (with the nonnegative output clamp unless overridden).
    ``widths`` lists the hidden widths.  The returned policy carries the
    best-validation parameters; ``info`` records the run summary and the
    best-so-far loss curve, which is nonincreasing by construction.
    """
    cfg = cfg or TrainConfig()
    if target == "primal":
        Y = data.U
    elif target == "dual":
        Y = data.lam
    else:
        raise ConfigError(f"unknown training target '{target}'")
    if len(data) < 2:
        raise ConfigError("training needs at least two samples")
    if Y.shape[1] == 0:
        raise ConfigError(f"target '{target}' has zero output dimension in this family")
    clamp = cfg.clamp_nonnegative if cfg.clamp_nonnegative is not None else (target == "dual")

    widths = [int(w) for w in widths]
    if any(w < 1 for w in widths):
        raise ConfigError(f"hidden widths must be positive, got {widths}")

    X = data.P
    in_shift, in_scale = _standardization(X, _IN_SCALE_FLOOR)
    out_shift, out_scale = _standardization(Y, _OUT_SCALE_FLOOR)
    full_widths = (X.shape[1], *widths, Y.shape[1])

    rng = np.random.default_rng(cfg.seed)
    Ws, bs = _init_layers(full_widths, rng)
    pol = Policy(widths=full_widths, weights=tuple(Ws), biases=tuple(bs),
                 input_shift=in_shift, input_scale=in_scale,
                 output_shift=out_shift, output_scale=out_scale,
                 clamp_nonnegative=clamp)

    M = len(data)
    perm = rng.permutation(M)
    n_val = int(round(cfg.validation_fraction * M))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ConfigError("validation split leaves no training samples")
    Z_all = (X - in_shift) / in_scale
    T_all = _normalize_targets(pol, Y)
    Z_tr, T_tr = Z_all[train_idx], T_all[train_idx]
    Z_val = Z_all[val_idx] if n_val else Z_tr
    T_val = T_all[val_idx] if n_val else T_tr

    Ws = [W.copy() for W in pol.weights]
    bs_ = [b.copy() for b in pol.biases]
    params = Ws + bs_
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    n_w = len(Ws)

    def eval_loss(Ze, Te):
        loss, _, _ = _net_loss_grads(Ws, bs_, Ze, Te)
        return loss

    best_loss = eval_loss(Z_val, T_val)
    best_params = [p.copy() for p in params]
    best_epoch = 0
    best_curve = [best_loss]
    train_loss = float("nan")
    step = 0
    epochs_run = 0
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(train_idx.size)
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            step += 1
            loss, gW, gb = _net_loss_grads(Ws, bs_, Z_tr[batch], T_tr[batch])
            train_loss = loss
            grads = gW + gb
            bc1 = 1.0 - cfg.beta1 ** step
            bc2 = 1.0 - cfg.beta2 ** step
            for p, m_s, v_s, g in zip(params, m_state, v_state, grads):
                m_s *= cfg.beta1
                m_s += (1.0 - cfg.beta1) * g
                v_s *= cfg.beta2
                v_s += (1.0 - cfg.beta2) * g * g
                p -= cfg.learning_rate * (m_s / bc1) / (np.sqrt(v_s / bc2) + cfg.adam_epsilon)
        val_loss = eval_loss(Z_val, T_val)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = [p.copy() for p in params]
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
        best_curve.append(best_loss)
        if stale >= cfg.patience:
            break

    final = replace(pol, weights=tuple(best_params[:n_w]), biases=tuple(best_params[n_w:]),
                    info={
                        "target": target,
                        "seed": cfg.seed,
                        "epochs_run": epochs_run,
                        "best_epoch": best_epoch,
                        "best_val_loss": best_loss,
                        "final_train_loss": train_loss,
                        "best_loss_curve": [float(v) for v in best_curve],
                    })
    return final


@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of the finite-difference gradient validation."""

    max_rel_error: float
    checked_coords: Tuple[int, ...]
    excluded_coords: Tuple[int, ...]  # perturbation crossed a ReLU kink


def grad_check(pol: Policy, X: np.ndarray, Y: np.ndarray, n_coords: int = 25,
               seed: int = 0, eps: float = 1e-5) -> GradCheckResult:
    """Compare analytic parameter gradients with central finite differences.

    Coordinates whose perturbation flips any hidden-unit activation are
    reported as excluded rather than failed; the loss is nonsmooth there and
    the two-sided difference is meaningless.  Relative errors use an
    absolute floor so near-zero gradients are compared fairly.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionError("grad_check expects matching 2-D sample arrays")
    T = _normalize_targets(pol, Y)
    _, gW, gb = _loss_and_grads(pol, X, T)
    analytic = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(gW, gb)])
    theta = pol.theta()
    rng = np.random.default_rng(seed)
    coords = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)

    def masks(policy):
        _, pres = _forward_raw(policy, X)
        return [pre > 0.0 for pre in pres[:-1]]

    checked, excluded = [], []
    max_err = 0.0
    for idx in coords:
        idx = int(idx)
        h = eps * max(1.0, abs(theta[idx]))
        plus = theta.copy()
        plus[idx] += h
        minus = theta.copy()
        minus[idx] -= h
        pol_p = pol.with_theta(plus)
        pol_m = pol.with_theta(minus)
        mask_p, mask_m = masks(pol_p), masks(pol_m)
        if any(not np.array_equal(a, b) for a, b in zip(mask_p, mask_m)):
            excluded.append(idx)
            continue
        loss_p, _, _ = _loss_and_grads(pol_p, X, T)
        loss_m, _, _ = _loss_and_grads(pol_m, X, T)
        numeric = (loss_p - loss_m) / (2.0 * h)
        denom = max(1e-3, abs(analytic[idx]), abs(numeric))
        max_err = max(max_err, abs(analytic[idx] - numeric) / denom)
        checked.append(idx)
    return GradCheckResult(max_rel_error=max_err, checked_coords=tuple(checked),
                           excluded_coords=tuple(excluded))


def policy_to_json(pol: Policy) -> str:
    """Canonical JSON text of a policy (deterministic bytes)."""
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_FORMAT_VERSION,
        "widths": list(pol.widths),
        "clamp_nonnegative": bool(pol.clamp_nonnegative),
        "input_shift": pol.input_shift.tolist(),
        "input_scale": pol.input_scale.tolist(),
        "output_shift": pol.output_shift.tolist(),
        "output_scale": pol.output_scale.tolist(),
        "layers": [{"W": W.tolist(), "b": b.tolist()}
                   for W, b in zip(pol.weights, pol.biases)],
        "info": pol.info,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_policy(pol: Policy, path) -> None:
    """Serialize a policy to a versioned JSON container (deterministic bytes)."""
    with open(path, "w") as fh:
        fh.write(policy_to_json(pol))


def load_policy(path) -> Policy:
    """Load a policy saved by ``save_policy``; round-trips bit-exactly."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"policy file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != POLICY_FORMAT:
        raise PolicyFormatError(f"policy file {path} has an unrecognized format tag")
    if doc.get("version") != POLICY_FORMAT_VERSION:
        raise PolicyFormatError(
            f"policy file {path} has version {doc.get('version')!r}; "
            f"this build reads version {POLICY_FORMAT_VERSION}"
        )
    try:
        widths = tuple(int(w) for w in doc["widths"])
        layers = doc["layers"]
        weights = tuple(np.array(layer["W"], dtype=float) for layer in layers)
        biases = tuple(np.array(layer["b"], dtype=float) for layer in layers)
        return Policy(
            widths=widths, weights=weights, biases=biases,
            input_shift=np.array(doc["input_shift"], dtype=float),
            input_scale=np.array(doc["input_scale"], dtype=float),
            output_shift=np.array(doc["output_shift"], dtype=float),
            output_scale=np.array(doc["output_scale"], dtype=float),
            clamp_nonnegative=bool(doc["clamp_nonnegative"]),
            info=doc.get("info", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFormatError(f"policy file {path} is malformed: {exc}") from None
