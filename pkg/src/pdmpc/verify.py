"""Randomized policy verification with explicit sample-complexity accounting.

A learned pair (primal policy, dual policy) is checked on fresh i.i.d.
parameter draws against two conditions:

* primal:  H(P) U~(P) <= h(P)  and  p(P; U~) <= J*(P) + gamma_p,
* dual:    lam~(P) >= 0        and  d(P; lam~) >= J*(P) - gamma_d.

If a condition holds on N >= ln(1/beta) / ln(1/(1-epsilon)) independent
samples, then with confidence at least 1-beta it holds with probability at
least 1-epsilon over the sampling distribution.  Verifying the primal
condition at (epsilon_p, beta_p, gamma_p) and the dual condition at
(epsilon_d, beta_d, gamma_d) yields, by a union bound, a combined guarantee
at epsilon = epsilon_p + epsilon_d, beta = beta_p + beta_d, and certificate
threshold gamma = gamma_p + gamma_d: with confidence 1-beta, a fresh draw
is feasible under both policies and has duality gap p - d at most gamma
with probability at least 1-epsilon, and on that event the gap
upper-bounds the true suboptimality p - J* of the learned input sequence.

Sample i of condition stream k is drawn from its own seeded substream
(seed sequence [seed, k, i]), so results are independent of evaluation
order and of the training draws.  Oracle failures on drawn samples are
logged and resampled within the sample's own substream, never silently
dropped.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DomainError, NumericalError
from .lpv_mpc import LPVSystem, MPCSpec, ParameterBox
from .policy import Dataset, Policy, TrainConfig, forward, policy_to_json, train
from .qp_core import (
    DenseQP,
    DualQP,
    certificate_values,
    condense,
    dual_objective,
    primal_objective,
)
from .qp_solver import SolverOptions, solve

__all__ = [
    "VerificationConfig",
    "ConditionReport",
    "EmpiricalStats",
    "VerificationReport",
    "TrainVerifyOutcome",
    "required_sample_size",
    "aux_primal_violation",
    "aux_dual_violation",
    "verify_primal",
    "verify_dual",
    "empirical_stats",
    "run_verification",
    "train_until_verified",
    "make_oracle_policies",
    "policy_fingerprint",
]

PolicyLike = Union[Policy, Callable[[np.ndarray], np.ndarray]]

# Substream tags keeping primal verification, dual verification, and
# empirical evaluation draws disjoint for any base seed.
_STREAM_PRIMAL = 1
_STREAM_DUAL = 2
_STREAM_EVAL = 3


def required_sample_size(epsilon: float, beta: float) -> int:
    """Samples needed so a condition that holds on all of them holds with
    probability >= 1-epsilon at confidence >= 1-beta.

    Exact ceiling of ln(1/beta) / ln(1/(1-epsilon)); the denominator is
    evaluated with log1p to stay accurate for small epsilon.
    """
    if not (0.0 < epsilon < 1.0):
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not (0.0 < beta < 1.0):
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    return int(math.ceil(math.log(1.0 / beta) / (-math.log1p(-epsilon))))


def aux_primal_violation(qp: DenseQP, U_tilde: np.ndarray, J_star: float,
                         gamma_p: float) -> float:
    """Largest violation of the primal condition at one sample.

    max over constraint residuals and the suboptimality excess
    p(U~) - J* - gamma_p; nonpositive iff the sample satisfies the primal
    condition exactly.  With no constraint rows only the suboptimality
    margin remains.
    """
    U_tilde = np.asarray(U_tilde, dtype=float).reshape(-1)
    feas = float((qp.H @ U_tilde - qp.h).max()) if qp.m else -math.inf
    return max(feas, primal_objective(qp, U_tilde) - float(J_star) - float(gamma_p))


def aux_dual_violation(dq: DualQP, lam_tilde: np.ndarray, J_star: float,
                       gamma_d: float) -> float:
    """Largest violation of the dual condition at one sample.

    max over multiplier negativity and the value shortfall
    J* - gamma_d - d(lam~); nonpositive iff the sample satisfies the dual
    condition exactly.
    """
    lam_tilde = np.asarray(lam_tilde, dtype=float).reshape(-1)
    neg = float((-lam_tilde).max()) if lam_tilde.size else -math.inf
    return max(neg, float(J_star) - float(gamma_d) - dual_objective(dq, lam_tilde))


@dataclass(frozen=True)
class VerificationConfig:
    """Risk, confidence, and certificate budgets with their split.

    Unset split entries default to equal halves of the totals.  The splits
    must sum back to the totals exactly; the combined union-bound guarantee
    is stated at those totals.
    """

    epsilon: float = 0.01
    beta: float = 2e-7
    gamma: float = 1.0
    epsilon_primal: Optional[float] = None
    epsilon_dual: Optional[float] = None
    beta_primal: Optional[float] = None
    beta_dual: Optional[float] = None
    gamma_primal: Optional[float] = None
    gamma_dual: Optional[float] = None
    feasibility_tol: float = 1e-6
    solver_tolerance: float = 1e-8
    seed: int = 0
    max_resample: int = 1000

    def __post_init__(self):
        for name in ("epsilon", "beta"):
            val = getattr(self, name)
            if not (0.0 < val < 1.0):
                raise ConfigError(f"{name} must lie in (0, 1), got {val}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.feasibility_tol < 0:
            raise ConfigError("feasibility_tol must be nonnegative")
        if self.solver_tolerance <= 0:
            raise ConfigError("solver_tolerance must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.max_resample < 0:
            raise ConfigError("max_resample must be nonnegative")
        for total_name, p_name, d_name in (
            ("epsilon", "epsilon_primal", "epsilon_dual"),
            ("beta", "beta_primal", "beta_dual"),
            ("gamma", "gamma_primal", "gamma_dual"),
        ):
            total = getattr(self, total_name)
            p_val, d_val = getattr(self, p_name), getattr(self, d_name)
            if p_val is None and d_val is None:
                p_val = d_val = 0.5 * total
                object.__setattr__(self, p_name, p_val)
                object.__setattr__(self, d_name, d_val)
            elif p_val is None or d_val is None:
                raise ConfigError(f"set both or neither of {p_name}/{d_name}")
            if p_val <= 0 or d_val <= 0:
                raise ConfigError(f"{p_name}/{d_name} must be positive")
            if abs((p_val + d_val) - total) > 1e-12 * max(1.0, abs(total)):
                raise ConfigError(
                    f"{p_name} + {d_name} = {p_val + d_val!r} does not sum to "
                    f"{total_name} = {total!r}"
                )

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tolerance=self.solver_tolerance)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "beta": self.beta, "gamma": self.gamma,
            "epsilon_primal": self.epsilon_primal, "epsilon_dual": self.epsilon_dual,
            "beta_primal": self.beta_primal, "beta_dual": self.beta_dual,
            "gamma_primal": self.gamma_primal, "gamma_dual": self.gamma_dual,
            "feasibility_tol": self.feasibility_tol,
            "solver_tolerance": self.solver_tolerance,
            "seed": self.seed,
            "max_resample": self.max_resample,
        }


@dataclass
class ConditionReport:
    """Outcome of one verification condition over its fresh sample set."""

    kind: str                 # "primal" or "dual"
    n_required: int
    n_evaluated: int
    passed: bool
    violations: list = field(default_factory=list)
    resample_events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_required": self.n_required,
            "n_evaluated": self.n_evaluated,
            "passed": self.passed,
            "violation_count": len(self.violations),
            "violations": self.violations,
            "resample_events": self.resample_events,
        }


def policy_fingerprint(pol: PolicyLike) -> str:
    """Stable identifier of a policy for report provenance.

    Network policies hash their canonical serialized bytes; plain callables
    are identified by name only.
    """
    if isinstance(pol, Policy):
        digest = hashlib.sha256(policy_to_json(pol).encode()).hexdigest()
        return f"sha256:{digest}"
    name = getattr(pol, "__qualname__", None) or getattr(pol, "__name__", None)
    return f"callable:{name or type(pol).__name__}"


def _eval_policy(pol: PolicyLike, flat: np.ndarray) -> np.ndarray:
    if isinstance(pol, Policy):
        return forward(pol, flat)
    return np.asarray(pol(flat), dtype=float).reshape(-1)


def _unpack_family(family) -> Tuple[LPVSystem, MPCSpec]:
    # accepts (system, spec) or the (system, spec, box) triple the builders return
    return family[0], family[1]


def _draw_labeled(system: LPVSystem, spec: MPCSpec, box: ParameterBox,
                  seed: int, stream: int, index: int, opts: SolverOptions,
                  max_resample: int):
    """Draw sample ``index`` of a condition stream and solve it exactly.

    Returns (flat, qp, solve result, resample events).  Resampling stays
    inside the sample's own substream, so other samples are unaffected.
    """
    rng = np.random.default_rng([seed, stream, index])
    gate = 10.0 * opts.tolerance
    events = []
    for _ in range(max_resample + 1):
        flat = rng.uniform(box.lower, box.upper)
        pv = box.layout.unflatten(flat)
        qp = condense(system, spec, pv)
        result = solve(qp, opts)
        if result.status == "optimal" and result.kkt.worst() <= gate:
            return flat, qp, result, events
        events.append({
            "sample_index": index,
            "status": result.status,
            "kkt_worst": result.kkt.worst(),
        })
    raise NumericalError(
        f"oracle failed {max_resample + 1} consecutive draws at sample {index}; "
        "the family or sampling box is ill-posed"
    )


def _run_condition(kind: str, stream: int, check, family, box: ParameterBox,
                   cfg: VerificationConfig, n: int, jobs: int) -> ConditionReport:
    """Shared driver: draw, solve, check, one sample at a time.

    ``check(index, flat, qp, result)`` returns a violation record or None.
    Work is independent across samples; with jobs > 1 samples run in a
    thread pool and merge back in index order.
    """
    system, spec = _unpack_family(family)
    opts = cfg.solver_options()

    def one(i: int):
        flat, qp, result, events = _draw_labeled(
            system, spec, box, cfg.seed, stream, i, opts, cfg.max_resample)
        return i, check(i, flat, qp, result), events

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, range(n)))
    else:
        outcomes = [one(i) for i in range(n)]
    outcomes.sort(key=lambda item: item[0])
    report = ConditionReport(kind=kind, n_required=n, n_evaluated=n, passed=True)
    for _, record, events in outcomes:
        report.resample_events.extend(events)
        if record is not None:
            report.violations.append(record)
    report.passed = not report.violations
    return report


def verify_primal(pol: PolicyLike, family, box: ParameterBox,
                  cfg: VerificationConfig, jobs: int = 1) -> ConditionReport:
    """Check the primal condition on fresh draws at (epsilon_p, beta_p, gamma_p).

    Passes iff every one of the N_p samples is feasible within the
    feasibility tolerance and suboptimal by at most gamma_p; every violator
    is recorded with its index and magnitudes.
    """
    n = required_sample_size(cfg.epsilon_primal, cfg.beta_primal)

    def check(i, flat, qp, result):
        U_tilde = _eval_policy(pol, flat)
        feas_viol = float((qp.H @ U_tilde - qp.h).max()) if qp.m else 0.0
        subopt_excess = primal_objective(qp, U_tilde) - result.J_star - cfg.gamma_primal
        if feas_viol > cfg.feasibility_tol or subopt_excess > 0.0:
            return {
                "sample_index": i,
                "condition": "primal",
                "feasibility_violation": max(feas_viol, 0.0),
                "suboptimality_excess": max(subopt_excess, 0.0),
            }
        return None

    return _run_condition("primal", _STREAM_PRIMAL, check, family, box, cfg, n, jobs)


def verify_dual(pol: PolicyLike, family, box: ParameterBox,
                cfg: VerificationConfig, jobs: int = 1) -> ConditionReport:
    """Check the dual condition on fresh draws at (epsilon_d, beta_d, gamma_d).

    Passes iff every one of the N_d samples has multipliers nonnegative
    within tolerance and dual value at least J* - gamma_d.
    """
    n = required_sample_size(cfg.epsilon_dual, cfg.beta_dual)

    def check(i, flat, qp, result):
        lam_tilde = _eval_policy(pol, flat)
        _, d_val, _, _, neg = certificate_values(qp, np.zeros(qp.n), lam_tilde)
        shortfall = (result.J_star - cfg.gamma_dual) - d_val
        if neg > cfg.feasibility_tol or shortfall > 0.0:
            return {
                "sample_index": i,
                "condition": "dual",
                "negativity": max(neg, 0.0),
                "value_shortfall": max(shortfall, 0.0),
            }
        return None

    return _run_condition("dual", _STREAM_DUAL, check, family, box, cfg, n, jobs)


@dataclass
class EmpiricalStats:
    """Per-sample suboptimality records and their summary statistics.

    alpha_p = p - J*, alpha_d = J* - d, alpha = p - d per sample; the rates
    are the fractions violating the primal condition, the dual condition,
    and the combined feasible-and-gap-below-gamma event.  Per-sample arrays
    are retained so every rate is recomputable from the records.
    """

    n: int
    rate_primal: float
    rate_dual: float
    rate_combined: float
    alpha_p: dict
    alpha_d: dict
    alpha: dict
    alpha_p_values: np.ndarray
    alpha_d_values: np.ndarray
    alpha_values: np.ndarray
    primal_feasible: np.ndarray
    dual_feasible: np.ndarray

    def to_dict(self) -> dict:
        """Summary block only; per-sample arrays go through to_csv."""
        return {
            "n": self.n,
            "rate_primal": self.rate_primal,
            "rate_dual": self.rate_dual,
            "rate_combined": self.rate_combined,
            "alpha_p": self.alpha_p,
            "alpha_d": self.alpha_d,
            "alpha": self.alpha,
        }

    def to_csv(self, path) -> None:
        header = "index,alpha_p,alpha_d,alpha,primal_feasible,dual_feasible"
        rows = [header]
        for i in range(self.n):
            rows.append(
                f"{i},{self.alpha_p_values[i]!r},{self.alpha_d_values[i]!r},"
                f"{self.alpha_values[i]!r},{int(self.primal_feasible[i])},"
                f"{int(self.dual_feasible[i])}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def _summary(values: np.ndarray) -> dict:
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "max": float(values.max()),
    }


def empirical_stats(pol_p: PolicyLike, pol_d: PolicyLike, family, box: ParameterBox,
                    n: int, seed: int = 0, cfg: Optional[VerificationConfig] = None,
                    jobs: int = 1) -> EmpiricalStats:
    """Evaluate both policies on n fresh draws and tabulate the alphas.

    Draws come from the evaluation substream of ``seed``, disjoint from
    both verification streams.  Thresholds (gamma splits, feasibility
    tolerance) come from ``cfg``.
    """
    if n < 1:
        raise ConfigError("evaluation set size must be at least 1")
    cfg = cfg or VerificationConfig()
    system, spec = _unpack_family(family)
    opts = cfg.solver_options()
    alpha_p = np.empty(n)
    alpha_d = np.empty(n)
    alpha = np.empty(n)
    ok_p = np.empty(n, dtype=bool)
    ok_d = np.empty(n, dtype=bool)

    def one(i: int):
        flat, qp, result, _ = _draw_labeled(
            system, spec, box, seed, _STREAM_EVAL, i, opts, cfg.max_resample)
        U_tilde = _eval_policy(pol_p, flat)
        lam_tilde = _eval_policy(pol_d, flat)
        p_val, d_val, gap, p_viol, d_viol = certificate_values(qp, U_tilde, lam_tilde)
        alpha_p[i] = p_val - result.J_star
        alpha_d[i] = result.J_star - d_val
        alpha[i] = gap
        ok_p[i] = p_viol <= cfg.feasibility_tol
        ok_d[i] = d_viol <= cfg.feasibility_tol

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, range(n)))
    else:
        for i in range(n):
            one(i)

    viol_p = ~ok_p | (alpha_p > cfg.gamma_primal)
    viol_d = ~ok_d | (alpha_d > cfg.gamma_dual)
    viol = ~ok_p | ~ok_d | (alpha > cfg.gamma)
    return EmpiricalStats(
        n=n,
        rate_primal=float(viol_p.mean()),
        rate_dual=float(viol_d.mean()),
        rate_combined=float(viol.mean()),
        alpha_p=_summary(alpha_p),
        alpha_d=_summary(alpha_d),
        alpha=_summary(alpha),
        alpha_p_values=alpha_p,
        alpha_d_values=alpha_d,
        alpha_values=alpha,
        primal_feasible=ok_p,
        dual_feasible=ok_d,
    )


def guarantee_statement(epsilon: float, beta: float, gamma: float) -> str:
    return (
        f"With confidence at least {1.0 - beta:.10g}, a parameter drawn from the "
        f"sampling distribution satisfies with probability at least {1.0 - epsilon:.10g}: "
        f"the learned input sequence is feasible, the learned multipliers are "
        f"nonnegative, and the duality gap is at most {gamma:.10g}; on that event "
        f"the gap upper-bounds the true suboptimality of the learned input sequence."
    )


@dataclass
class VerificationReport:
    """Combined verification outcome with the quantitative guarantee.

    JSON schema (to_dict): passed, statement, config (all budgets, splits,
    tolerances, seed), fingerprints {primal, dual}, primal/dual condition
    blocks (n_required, n_evaluated, passed, violation_count, violations,
    resample_events), optional stats summary block.
    """

    passed: bool
    statement: str
    config: dict
    fingerprints: dict
    primal: ConditionReport
    dual: ConditionReport
    stats: Optional[EmpiricalStats] = None

    def to_dict(self) -> dict:
        doc = {
            "passed": self.passed,
            "statement": self.statement,
            "config": self.config,
            "fingerprints": self.fingerprints,
            "primal": self.primal.to_dict(),
            "dual": self.dual.to_dict(),
        }
        if self.stats is not None:
            doc["stats"] = self.stats.to_dict()
        return doc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_verification(pol_p: PolicyLike, pol_d: PolicyLike, family, box: ParameterBox,
                     cfg: Optional[VerificationConfig] = None,
                     eval_samples: int = 0, jobs: int = 1,
                     override_box: Optional[ParameterBox] = None) -> VerificationReport:
    """Verify both conditions on their fresh sample sets and combine them.

    The combined pass is the conjunction of the per-condition passes; the
    guarantee is stated at the summed budgets via the union bound.
    ``eval_samples > 0`` additionally tabulates empirical statistics on an
    independent evaluation stream.  ``override_box`` substitutes a
    different sampling distribution; the stated guarantee then applies to
    that distribution, not the training one, and a warning says so.
    """
    cfg = cfg or VerificationConfig()
    if override_box is not None:
        warnings.warn(
            "verification draws use the override distribution; the stated "
            "guarantee applies to it, not to the training distribution",
            stacklevel=2,
        )
        box = override_box
    primal = verify_primal(pol_p, family, box, cfg, jobs=jobs)
    dual = verify_dual(pol_d, family, box, cfg, jobs=jobs)
    stats = None
    if eval_samples:
        stats = empirical_stats(pol_p, pol_d, family, box, eval_samples,
                                seed=cfg.seed, cfg=cfg, jobs=jobs)
    return VerificationReport(
        passed=primal.passed and dual.passed,
        statement=guarantee_statement(cfg.epsilon, cfg.beta, cfg.gamma),
        config=cfg.to_dict(),
        fingerprints={
            "primal": policy_fingerprint(pol_p),
            "dual": policy_fingerprint(pol_d),
        },
        primal=primal,
        dual=dual,
        stats=stats,
    )


@dataclass
class TrainVerifyOutcome:
    """Result of the train-and-verify loop."""

    primal: Policy
    dual: Policy
    report: VerificationReport
    attempts: list
    passed: bool


def train_until_verified(family, box: ParameterBox, data: Dataset,
                         primal_widths: Sequence[int], dual_widths: Sequence[int],
                         train_cfg: Optional[TrainConfig] = None,
                         ver_cfg: Optional[VerificationConfig] = None,
                         max_attempts: int = 5,
                         dual_data: Optional[Dataset] = None,
                         jobs: int = 1) -> TrainVerifyOutcome:
    """Train both policies and verify, doubling hidden widths on failure.

    Each attempt uses a fresh training seed and fresh verification draws;
    at most max_attempts attempts are made.  The last attempt's policies
    and report are returned even on overall failure.
    """
    if max_attempts < 1:
        raise ConfigError("max_attempts must be at least 1")
    train_cfg = train_cfg or TrainConfig()
    ver_cfg = ver_cfg or VerificationConfig()
    dual_data = dual_data if dual_data is not None else data
    attempts = []
    pol_p = pol_d = None
    report = None
    for attempt in range(max_attempts):
        scale = 2 ** attempt
        p_widths = [int(w) * scale for w in primal_widths]
        d_widths = [int(w) * scale for w in dual_widths]
        cfg_i = replace(train_cfg, seed=train_cfg.seed + attempt)
        pol_p = train(data, "primal", p_widths, cfg_i)
        pol_d = train(dual_data, "dual", d_widths, cfg_i)
        ver_i = replace(ver_cfg, seed=ver_cfg.seed + 1000 * attempt)
        report = run_verification(pol_p, pol_d, family, box, ver_i, jobs=jobs)
        attempts.append({
            "attempt": attempt,
            "primal_widths": p_widths,
            "dual_widths": d_widths,
            "train_seed": cfg_i.seed,
            "verification_seed": ver_i.seed,
            "passed": report.passed,
            "primal_violations": len(report.primal.violations),
            "dual_violations": len(report.dual.violations),
        })
        if report.passed:
            break
    return TrainVerifyOutcome(primal=pol_p, dual=pol_d, report=report,
                              attempts=attempts, passed=report.passed)


def make_oracle_policies(family, box: ParameterBox,
                         options: Optional[SolverOptions] = None):
    """Exact-solver wrappers with the policy calling convention.

    Ground-truth stand-ins: verification of the oracle pair passes for any
    positive budget, and its certificates collapse to the solver's own
    duality gap.
    """
    system, spec = _unpack_family(family)
    opts = options or SolverOptions()

    def oracle_primal(flat: np.ndarray) -> np.ndarray:
        pv = box.layout.unflatten(np.asarray(flat, dtype=float))
        return solve(condense(system, spec, pv), opts).U_star

    def oracle_dual(flat: np.ndarray) -> np.ndarray:
        pv = box.layout.unflatten(np.asarray(flat, dtype=float))
        return solve(condense(system, spec, pv), opts).lambda_star

    return oracle_primal, oracle_dual
