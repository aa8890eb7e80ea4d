"""Interior-point solver: frozen oracles, random instances, determinism."""

import dataclasses

import numpy as np
import pytest

from pdmpc import (
    DenseQP,
    SolverOptions,
    backup_action,
    check_kkt,
    condense,
    primal_objective,
    sample_parameters,
    solve,
    solve_call_count,
)


def _scalar_qp():
    # min 0.5 u^2 s.t. u >= 1 -> U* = 1, lam* = 1, J* = 0.5
    return DenseQP(Q=np.array([[1.0]]), c=np.array([0.0]),
                   H=np.array([[-1.0]]), h=np.array([-1.0]))


def _random_qp(rng, n=None, m=None):
    n = n or int(rng.integers(1, 13))
    m = m if m is not None else int(rng.integers(0, 41))
    A = rng.standard_normal((n, n))
    Q = A @ A.T + n * np.eye(n)
    c = rng.standard_normal(n) * 2.0
    H = rng.standard_normal((m, n))
    x_bar = rng.standard_normal(n)
    h = H @ x_bar + rng.uniform(0.1, 2.0, size=m)  # strictly feasible at x_bar
    return DenseQP(Q=Q, c=c, H=H, h=h)


def test_scalar_oracle():
    res = solve(_scalar_qp())
    assert res.status == "optimal"
    assert res.U_star[0] == pytest.approx(1.0, abs=1e-8)
    assert res.lambda_star[0] == pytest.approx(1.0, abs=1e-8)
    assert res.J_star == pytest.approx(0.5, abs=1e-8)
    assert res.kkt.worst() <= 1e-7


def test_unconstrained_closed_form():
    qp = DenseQP(Q=np.array([[2.0]]), c=np.array([-2.0]),
                 H=np.zeros((0, 1)), h=np.zeros(0))
    res = solve(qp)
    assert res.status == "optimal"
    assert res.iterations == 0
    assert res.lambda_star.shape == (0,)
    assert res.U_star[0] == pytest.approx(1.0, abs=1e-12)
    assert res.J_star == pytest.approx(-1.0, abs=1e-12)


def test_random_instances_satisfy_kkt():
    rng = np.random.default_rng(0)
    for _ in range(200):
        qp = _random_qp(rng)
        res = solve(qp)
        assert res.status == "optimal"
        assert res.kkt.stationarity <= 1e-6
        assert res.kkt.primal_feasibility <= 1e-6
        assert res.kkt.dual_feasibility <= 1e-6
        assert res.kkt.complementarity <= 1e-7
        # multiplier support: lam > 0 only on (near) active rows
        if qp.m:
            slack = qp.h - qp.H @ res.U_star
            active = res.lambda_star > 1e-5
            assert np.all(slack[active] <= 1e-4)


def test_solution_beats_feasible_perturbations():
    rng = np.random.default_rng(1)
    qp = _random_qp(rng, n=6, m=15)
    res = solve(qp)
    for _ in range(50):
        U = res.U_star + 0.05 * rng.standard_normal(6)
        if np.all(qp.H @ U <= qp.h):
            assert primal_objective(qp, U) >= res.J_star - 1e-9


def test_infeasible_detection():
    qp = DenseQP(Q=np.array([[1.0]]), c=np.array([0.0]),
                 H=np.array([[1.0], [-1.0]]), h=np.array([-1.0, -1.0]))
    res = solve(qp)
    assert res.status == "infeasible"


def test_iteration_cap():
    res = solve(_scalar_qp(), SolverOptions(max_iterations=1))
    assert res.status == "max_iter"
    assert res.iterations == 1


def test_deterministic_replay():
    rng = np.random.default_rng(2)
    qp = _random_qp(rng, n=8, m=20)
    a = solve(qp)
    b = solve(qp)
    assert np.array_equal(a.U_star, b.U_star)
    assert np.array_equal(a.lambda_star, b.lambda_star)
    assert a.J_star == b.J_star
    assert a.iterations == b.iterations


def test_check_kkt_flags_perturbed_solution():
    qp = _scalar_qp()
    res = solve(qp)
    assert check_kkt(qp, res).worst() == pytest.approx(res.kkt.worst(), abs=1e-12)
    bad = dataclasses.replace(res, U_star=res.U_star + 0.1)
    assert check_kkt(qp, bad).worst() > 0.05


def test_solve_call_count_increments():
    before = solve_call_count()
    solve(_scalar_qp())
    solve(_scalar_qp())
    assert solve_call_count() == before + 2


def test_backup_action_is_first_optimal_input(benchmark):
    system, spec, box = benchmark
    for pv in sample_parameters(box, 3, seed=41):
        u = backup_action(system, spec, pv)
        res = solve(condense(system, spec, pv))
        assert u.shape == (system.n_u,)
        assert np.allclose(u, res.U_star[:system.n_u], atol=1e-9)


def test_tight_activity_profile(benchmark_tight):
    # input bound must be active with positive multiplier when the draw
    # demands more authority than the box allows
    system, spec, box = benchmark_tight
    found = False
    for pv in sample_parameters(box, 20, seed=43):
        qp = condense(system, spec, pv)
        res = solve(qp)
        assert res.status == "optimal"
        if res.lambda_star.max() > 0.1:
            slack = qp.h - qp.H @ res.U_star
            assert slack[np.argmax(res.lambda_star)] <= 1e-6
            found = True
    assert found
