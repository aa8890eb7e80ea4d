"""Shared fixtures: problem families and session-scoped trained policies.

Training is deterministic (fixed seeds), so every test run exercises the
same networks.  The full-quality pairs take a few seconds each to fit and
are reused across test modules.
"""

import pytest

from pdmpc import TrainConfig, build_benchmark_lti, build_icc_surrogate, generate_dataset, train


@pytest.fixture(scope="session")
def benchmark():
    """(system, spec, box) for the two-state constrained LTI family."""
    return build_benchmark_lti()


@pytest.fixture(scope="session")
def benchmark_rate():
    """Benchmark variant with input-rate constraints (parameter gains u_prev)."""
    return build_benchmark_lti({"du_max": 4.0})


@pytest.fixture(scope="session")
def benchmark_tight():
    """Benchmark variant with a small input bound so constraints activate.

    On this variant the optimal multipliers are far from zero for many
    draws, which makes it useful for showing that a zero dual policy is
    rejected by the dual condition.
    """
    return build_benchmark_lti({"u_max": 0.1, "sample_bound": (2.5, 2.0)})


@pytest.fixture(scope="session")
def icc():
    """(system, spec, box) for the frozen-scheduling chain surrogate."""
    return build_icc_surrogate()


@pytest.fixture(scope="session")
def benchmark_data(benchmark):
    system, spec, box = benchmark
    return generate_dataset(system, spec, box, 1000, seed=0)


@pytest.fixture(scope="session")
def trained_benchmark(benchmark, benchmark_data):
    """Full-quality primal/dual pair on the benchmark family."""
    pol_p = train(benchmark_data, "primal", [15, 15, 15], TrainConfig(seed=0))
    pol_d = train(benchmark_data, "dual", [5, 5, 5], TrainConfig(seed=0))
    return pol_p, pol_d


@pytest.fixture(scope="session")
def trained_benchmark_rate(benchmark_rate):
    system, spec, box = benchmark_rate
    data = generate_dataset(system, spec, box, 800, seed=1)
    pol_p = train(data, "primal", [15, 15, 15], TrainConfig(seed=1))
    pol_d = train(data, "dual", [5, 5, 5], TrainConfig(seed=1))
    return pol_p, pol_d


@pytest.fixture(scope="session")
def trained_icc(icc):
    system, spec, box = icc
    data = generate_dataset(system, spec, box, 600, seed=2)
    pol_p = train(data, "primal", [15, 15, 15], TrainConfig(seed=2, max_epochs=800))
    pol_d = train(data, "dual", [5, 5, 5], TrainConfig(seed=2, max_epochs=800))
    return pol_p, pol_d
