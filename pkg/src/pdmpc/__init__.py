"""Learned MPC policies with runtime duality-gap certificates.

The package condenses parametric linear MPC problems into dense QPs,
labels sampled instances with an exact interior-point solver, fits primal
(input-sequence) and dual (multiplier) networks, verifies them offline on
randomized samples with explicit (epsilon, beta) guarantees, and runs an
online loop in which every learned input is either certified by its
duality gap or replaced by the exact solver.
"""

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    NumericalError,
    PolicyFormatError,
)
from .lpv_mpc import (
    Family,
    LPVSystem,
    MPCSpec,
    ParameterBox,
    ParameterLayout,
    ParameterVector,
    build_benchmark_lti,
    build_icc_surrogate,
    eval_system,
    export_parameters_csv,
    load_family_config,
    sample_parameters,
    step_dynamics,
)
from .policy import (
    Dataset,
    GradCheckResult,
    Policy,
    TrainConfig,
    forward,
    forward_batch,
    generate_dataset,
    grad_check,
    load_policy,
    policy_to_json,
    save_policy,
    train,
)
from .qp_core import (
    DenseQP,
    DualQP,
    build_dual,
    certificate_values,
    condense,
    dual_feasible,
    dual_objective,
    duality_gap,
    primal_feasible,
    primal_objective,
    read_dense_qp,
    recover_primal,
    write_dense_qp,
    write_dual_qp,
)
from .qp_solver import (
    KKTResiduals,
    SolveResult,
    SolverOptions,
    backup_action,
    check_kkt,
    solve,
    solve_call_count,
)
from .runtime import (
    CertifiedController,
    Scenario,
    SimulationLog,
    StepRecord,
    TimingStats,
    benchmark_timing,
    certify_and_act,
    make_equilibrium_scenario,
    make_random_scenario,
    simulate,
    write_step_records_csv,
    write_step_records_jsonl,
)
from .verify import (
    ConditionReport,
    EmpiricalStats,
    TrainVerifyOutcome,
    VerificationConfig,
    VerificationReport,
    aux_dual_violation,
    aux_primal_violation,
    empirical_stats,
    make_oracle_policies,
    policy_fingerprint,
    required_sample_size,
    run_verification,
    train_until_verified,
    verify_dual,
    verify_primal,
)

__version__ = "0.1.0"
