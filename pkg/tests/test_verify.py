"""Randomized verification: sample sizes, conditions, and reports.

The sample-size oracle is exact rational arithmetic: N is correct iff
(1 - eps)^N <= beta < (1 - eps)^(N-1), checked with Fraction powers so no
floating-point log enters the reference computation.
"""

import json
import warnings
from fractions import Fraction

import numpy as np
import pytest

from pdmpc import (
    ParameterBox,
    TrainConfig,
    VerificationConfig,
    aux_dual_violation,
    aux_primal_violation,
    build_benchmark_lti,
    build_dual,
    condense,
    empirical_stats,
    make_oracle_policies,
    policy_fingerprint,
    required_sample_size,
    run_verification,
    sample_parameters,
    solve,
    train,
    train_until_verified,
    verify_dual,
    verify_primal,
)
from pdmpc.errors import ConfigError, DomainError


def _rational_bracket(eps_frac, beta_frac, n):
    """True iff n is the minimal sample count for (eps, beta)."""
    one_minus = 1 - eps_frac
    return one_minus ** n <= beta_frac and (n == 1 or one_minus ** (n - 1) > beta_frac)


# ---------------------------------------------------------------------------
# sample-size formula
# ---------------------------------------------------------------------------

def test_sample_size_frozen_values():
    assert required_sample_size(0.005, 1e-7) == 3216
    assert required_sample_size(0.5, 0.5) == 1
    assert required_sample_size(0.01, 1e-6) == 1375


def test_sample_size_against_rational_oracle():
    cases = [
        (Fraction(1, 200), Fraction(1, 10 ** 7), 3216),
        (Fraction(1, 2), Fraction(1, 2), 1),
        (Fraction(1, 100), Fraction(1, 10 ** 6), 1375),
        (Fraction(1, 100), Fraction(1, 10 ** 7), 1604),
        (Fraction(1, 10), Fraction(1, 100), 44),
    ]
    for eps, beta, n in cases:
        assert _rational_bracket(eps, beta, n)
        assert required_sample_size(float(eps), float(beta)) == n


def test_sample_size_monotonicity_grid():
    eps_grid = np.linspace(0.002, 0.2, 8)
    beta_grid = np.logspace(-9, -2, 8)
    table = np.array([[required_sample_size(e, b) for b in beta_grid] for e in eps_grid])
    # stricter epsilon (smaller) and stricter beta (smaller) both need more samples
    assert np.all(np.diff(table, axis=0) <= 0)
    assert np.all(np.diff(table, axis=1) <= 0)
    assert np.all(table >= 1)


def test_sample_size_domain():
    for eps, beta in [(0.0, 0.5), (1.0, 0.5), (-0.1, 0.5), (0.5, 0.0), (0.5, 1.0), (0.5, 1.5)]:
        with pytest.raises(DomainError):
            required_sample_size(eps, beta)


# ---------------------------------------------------------------------------
# auxiliary violation functions
# ---------------------------------------------------------------------------

def test_aux_functions_at_exact_solution(benchmark):
    system, spec, box = benchmark
    pv = sample_parameters(box, 1, seed=2)[0]
    qp = condense(system, spec, pv)
    dq = build_dual(qp)
    res = solve(qp)
    # at the optimizer with gamma_p = 0.5 the suboptimality term is -0.5
    # and feasibility is clean, so the max sits at -0.5
    assert aux_primal_violation(qp, res.U_star, res.J_star, 0.5) == pytest.approx(-0.5, abs=1e-6)
    assert aux_dual_violation(dq, res.lambda_star, res.J_star, 0.5) <= 0.0


def test_aux_primal_flags_infeasibility(benchmark):
    system, spec, box = benchmark
    pv = sample_parameters(box, 1, seed=3)[0]
    qp = condense(system, spec, pv)
    res = solve(qp)
    # push the first input 0.3 beyond its bound
    U_bad = np.array(res.U_star)
    U_bad[0] = 2.3
    v = aux_primal_violation(qp, U_bad, res.J_star, 1e6)
    assert v >= 0.3 - 1e-9


def test_aux_primal_flags_suboptimality():
    # scalar problem: min 0.5 u^2 s.t. u >= 1; feasible point u = 2 has
    # p = 2 vs J* = 0.5, so excess is 1.5 - gamma_p
    from pdmpc import DenseQP
    qp = DenseQP(Q=np.array([[1.0]]), c=np.array([0.0]),
                 H=np.array([[-1.0]]), h=np.array([-1.0]))
    v = aux_primal_violation(qp, np.array([2.0]), 0.5, 1.0)
    assert v == pytest.approx(0.5)
    assert aux_primal_violation(qp, np.array([2.0]), 0.5, 2.0) < 0.0


def test_aux_dual_flags_negativity_and_shortfall():
    from pdmpc import DenseQP
    qp = DenseQP(Q=np.array([[1.0]]), c=np.array([0.0]),
                 H=np.array([[-1.0]]), h=np.array([-1.0]))
    dq = build_dual(qp)
    # negative multiplier dominates for large gamma_d
    assert aux_dual_violation(dq, np.array([-0.2]), 0.5, 1e6) == pytest.approx(0.2)
    # lam = 0 gives d = 0 vs J* = 0.5: shortfall 0.5 - gamma_d
    assert aux_dual_violation(dq, np.array([0.0]), 0.5, 0.1) == pytest.approx(0.4)
    # strictly positive lam with a generous gamma_d: both terms negative,
    # the negativity margin -0.05 is the larger one
    assert aux_dual_violation(dq, np.array([0.05]), 0.5, 0.6) == pytest.approx(-0.05)


# ---------------------------------------------------------------------------
# condition drivers
# ---------------------------------------------------------------------------

def test_oracle_policies_pass_both_conditions(benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    cfg = VerificationConfig(epsilon=0.2, beta=0.05, gamma=0.2, seed=1)
    rp = verify_primal(pol_p, (system, spec), box, cfg)
    rd = verify_dual(pol_d, (system, spec), box, cfg)
    assert rp.passed and rd.passed
    assert rp.n_evaluated == rp.n_required == required_sample_size(0.1, 0.025)
    assert rd.n_evaluated == rd.n_required
    assert rp.violations == [] and rd.violations == []


def test_garbage_primal_policy_fails(benchmark):
    system, spec, box = benchmark
    cfg = VerificationConfig(epsilon=0.2, beta=0.05, gamma=1.0, seed=1)
    bad = lambda flat: np.full(3, 50.0)  # violates the input box everywhere
    rep = verify_primal(bad, (system, spec), box, cfg)
    assert not rep.passed
    assert len(rep.violations) >= 1
    rec = rep.violations[0]
    assert rec["feasibility_violation"] > 0.0
    assert "sample_index" in rec


def test_negative_dual_policy_fails(benchmark):
    system, spec, box = benchmark
    cfg = VerificationConfig(epsilon=0.2, beta=0.05, gamma=1.0, seed=1)
    bad = lambda flat: np.full(22, -1.0)
    rep = verify_dual(bad, (system, spec), box, cfg)
    assert not rep.passed
    assert rep.violations[0]["negativity"] == pytest.approx(1.0)


def test_zero_dual_passes_on_interior_family(benchmark):
    # the default box is calibrated so optima are strictly interior, hence
    # lam* = 0 and the zero policy meets the dual condition even at a
    # tight gamma; this is a property of the family, not a défaut
    system, spec, box = benchmark
    cfg = VerificationConfig(epsilon=0.2, beta=0.05, gamma=1e-6, seed=5)
    rep = verify_dual(lambda flat: np.zeros(22), (system, spec), box, cfg)
    assert rep.passed


def test_zero_dual_fails_on_tight_family(benchmark_tight):
    # with active constraints the zero multiplier leaves a value shortfall
    # beyond gamma_d on a positive-probability region
    system, spec, box = benchmark_tight
    cfg = VerificationConfig(epsilon=0.1, beta=0.01, gamma=0.2, seed=0)
    rep = verify_dual(lambda flat: np.zeros(22), (system, spec), box, cfg)
    assert not rep.passed
    assert any(rec["value_shortfall"] > 0.0 for rec in rep.violations)


def test_resampling_on_infeasible_draws():
    # widen the position range so a sliver of the box has no feasible
    # trajectory; those draws must be resampled within the substream and
    # logged, and verification must still complete
    system, spec, box = build_benchmark_lti({"sample_bound": (5.5, 2.0)})
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    cfg = VerificationConfig(epsilon=0.1, beta=0.05, gamma=1.0, seed=2, max_resample=50)
    rep = verify_primal(pol_p, (system, spec), box, cfg)
    assert rep.passed
    assert len(rep.resample_events) >= 1
    ev = rep.resample_events[0]
    assert ev["status"] != "optimal"
    assert "sample_index" in ev


def test_verification_seed_reproducibility(benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    cfg = VerificationConfig(epsilon=0.3, beta=0.1, gamma=0.5, seed=9)
    a = run_verification(pol_p, pol_d, (system, spec), box, cfg=cfg)
    b = run_verification(pol_p, pol_d, (system, spec), box, cfg=cfg)
    assert a.to_dict() == b.to_dict()


def test_parallel_jobs_match_serial(benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    cfg = VerificationConfig(epsilon=0.2, beta=0.1, gamma=0.5, seed=4)
    serial = run_verification(pol_p, pol_d, (system, spec), box, cfg=cfg, eval_samples=40)
    parallel = run_verification(pol_p, pol_d, (system, spec), box, cfg=cfg,
                                eval_samples=40, jobs=3)
    assert serial.to_dict() == parallel.to_dict()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_default_splits_are_halves():
    cfg = VerificationConfig(epsilon=0.01, beta=2e-7, gamma=1.0)
    assert cfg.epsilon_primal == cfg.epsilon_dual == 0.005
    assert cfg.beta_primal == cfg.beta_dual == 1e-7
    assert cfg.gamma_primal == cfg.gamma_dual == 0.5


def test_config_rejects_inconsistent_splits():
    with pytest.raises(ConfigError):
        VerificationConfig(epsilon=0.01, epsilon_primal=0.003, epsilon_dual=0.005)
    with pytest.raises(ConfigError):
        VerificationConfig(epsilon=0.01, epsilon_primal=0.003)  # partner missing
    with pytest.raises(ConfigError):
        VerificationConfig(gamma=-1.0)
    with pytest.raises(ConfigError):
        VerificationConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        VerificationConfig(seed=-1)
    with pytest.raises(ConfigError):
        VerificationConfig(beta_primal=1e-7, beta_dual=3e-7, beta=2e-7)


def test_config_accepts_explicit_asymmetric_splits():
    cfg = VerificationConfig(epsilon=0.01, beta=2e-7, gamma=1.0,
                             epsilon_primal=0.008, epsilon_dual=0.002,
                             gamma_primal=0.9, gamma_dual=0.1)
    assert cfg.epsilon_primal == 0.008
    assert required_sample_size(cfg.epsilon_dual, cfg.beta_dual) > \
        required_sample_size(cfg.epsilon_primal, cfg.beta_primal)


# ---------------------------------------------------------------------------
# reports and statistics
# ---------------------------------------------------------------------------

def test_report_round_trip_and_statement(tmp_path, benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    cfg = VerificationConfig(epsilon=0.2, beta=0.1, gamma=0.8, seed=6)
    rep = run_verification(pol_p, pol_d, (system, spec), box, cfg=cfg, eval_samples=25)
    assert rep.passed
    # statement quotes confidence 1 - beta, probability 1 - epsilon, and gamma
    assert "0.9" in rep.statement and "0.8" in rep.statement
    path = tmp_path / "report.json"
    rep.save(path)
    doc = json.loads(path.read_text())
    assert doc["passed"] is True
    assert doc["primal"]["n_required"] == rep.primal.n_required
    assert doc["config"]["epsilon"] == 0.2
    assert doc["stats"]["n"] == 25
    assert set(doc["fingerprints"]) == {"primal", "dual"}


def test_empirical_stats_oracle_alphas_vanish(benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    stats = empirical_stats(pol_p, pol_d, (system, spec), box, n=60, seed=3)
    assert stats.n == 60
    assert stats.rate_primal == 0.0
    assert stats.rate_dual == 0.0
    assert stats.rate_combined == 0.0
    assert stats.alpha["max"] <= 1e-6
    # alpha splits additively into the primal and dual parts
    assert np.allclose(stats.alpha_values,
                       stats.alpha_p_values + stats.alpha_d_values, atol=1e-9)


def test_empirical_stats_deterministic(benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    a = empirical_stats(pol_p, pol_d, (system, spec), box, n=20, seed=8)
    b = empirical_stats(pol_p, pol_d, (system, spec), box, n=20, seed=8)
    assert np.array_equal(a.alpha_values, b.alpha_values)
    c = empirical_stats(pol_p, pol_d, (system, spec), box, n=20, seed=9)
    assert not np.array_equal(a.alpha_values, c.alpha_values)


def test_stats_csv_export(tmp_path, benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    stats = empirical_stats(pol_p, pol_d, (system, spec), box, n=10, seed=1)
    path = tmp_path / "stats.csv"
    stats.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 11
    assert lines[0].split(",")[0] == "index"


def test_policy_fingerprints(benchmark, trained_benchmark):
    pol_p, pol_d = trained_benchmark
    fp = policy_fingerprint(pol_p)
    assert fp.startswith("sha256:")
    assert fp == policy_fingerprint(pol_p)
    assert fp != policy_fingerprint(pol_d)
    system, spec, box = benchmark
    op, _ = make_oracle_policies((system, spec), box)
    assert policy_fingerprint(op).startswith("callable:")


def test_override_box_warns(benchmark):
    system, spec, box = benchmark
    pol_p, pol_d = make_oracle_policies((system, spec), box)
    cfg = VerificationConfig(epsilon=0.3, beta=0.2, gamma=0.5, seed=0)
    shrunk = ParameterBox(lower=0.5 * box.lower, upper=0.5 * box.upper, layout=box.layout)
    with pytest.warns(UserWarning):
        rep = run_verification(pol_p, pol_d, (system, spec), box, cfg=cfg,
                               override_box=shrunk)
    assert rep.passed


# ---------------------------------------------------------------------------
# train-until-verified loop
# ---------------------------------------------------------------------------

def test_train_until_verified_passes_first_attempt(benchmark, benchmark_data):
    system, spec, box = benchmark
    cfg = VerificationConfig(epsilon=0.1, beta=0.01, gamma=1.0, seed=3)
    out = train_until_verified((system, spec), box, benchmark_data,
                               primal_widths=[15, 15, 15], dual_widths=[5, 5, 5],
                               train_cfg=TrainConfig(seed=0),
                               ver_cfg=cfg, max_attempts=2)
    assert out.passed
    assert len(out.attempts) == 1
    assert out.attempts[0]["primal_widths"] == [15, 15, 15]
    assert out.report.passed


def test_train_until_verified_doubles_widths_on_failure(benchmark, benchmark_data):
    # gamma too small for any approximation: every attempt fails and the
    # hidden widths double each time
    system, spec, box = benchmark
    cfg = VerificationConfig(epsilon=0.3, beta=0.1, gamma=1e-12, seed=3)
    out = train_until_verified((system, spec), box, benchmark_data,
                               primal_widths=[4], dual_widths=[3],
                               train_cfg=TrainConfig(seed=0, max_epochs=30),
                               ver_cfg=cfg, max_attempts=3)
    assert not out.passed
    assert len(out.attempts) == 3
    assert out.attempts[0]["primal_widths"] == [4]
    assert out.attempts[1]["primal_widths"] == [8]
    assert out.attempts[2]["primal_widths"] == [16]
    seeds = [a["verification_seed"] for a in out.attempts]
    assert len(set(seeds)) == 3
