"""Command-line pipeline: gen-data, train, verify, simulate, bench.

One JSON config file describes a full run; each command reads the sections
it needs and ignores the rest, so the same file drives the whole pipeline.
Flags override the corresponding file keys.  Every artifact embeds the
sha256 of the effective config and the seeds in use, and rerunning a
command with the same config and seed reproduces the primary outputs byte
for byte (wall-clock timings excluded).

Exit codes: 0 success (verification pass), 1 verification fail, 2 usage,
config, or runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NumericalError, PolicyFormatError
from .lpv_mpc import load_family_config, sample_parameters
from .policy import (
    Dataset,
    TrainConfig,
    generate_dataset,
    load_policy,
    save_policy,
    train,
)
from .qp_solver import SolverOptions
from .runtime import (
    CertifiedController,
    benchmark_timing,
    make_equilibrium_scenario,
    make_random_scenario,
    simulate,
)
from .verify import (
    VerificationConfig,
    make_oracle_policies,
    required_sample_size,
    run_verification,
    train_until_verified,
)

__all__ = ["main", "build_parser", "DEFAULT_CONFIG"]

DEFAULT_CONFIG = {
    "family": {"family": "benchmark"},
    "data": {
        "m": 1000,
        "seed": 0,
        "solver_tolerance": 1e-8,
    },
    "train": {
        "primal_widths": [15, 15, 15],
        "dual_widths": [5, 5, 5],
        "seed": 0,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "max_epochs": 2000,
        "patience": 200,
        "validation_fraction": 0.1,
    },
    "verify": {
        "epsilon": 0.01,
        "beta": 2e-7,
        "gamma": 1.0,
        "epsilon_primal": None,
        "epsilon_dual": None,
        "beta_primal": None,
        "beta_dual": None,
        "gamma_primal": None,
        "gamma_dual": None,
        "feasibility_tol": 1e-6,
        "solver_tolerance": 1e-8,
        "seed": 0,
        "eval_samples": 0,
        "max_attempts": 5,
    },
    "simulate": {
        "steps": 100,
        "seed": 0,
        "audit": False,
        "gamma": 1.0,
        "feasibility_tol": 1e-6,
        "equilibrium": False,
    },
    "bench": {
        "samples": 20,
        "repetitions": 100,
        "warmup": 5,
        "seed": 0,
        "gamma": 1.0,
    },
}

_USER_ERRORS = (ConfigError, DomainError, DimensionError, PolicyFormatError,
                NumericalError, OSError, json.JSONDecodeError)


def _merge_section(defaults: dict, override: dict, section: str) -> dict:
    unknown = set(override) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in config section '{section}': {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(override)
    return merged


def load_run_config(path: Optional[str]) -> dict:
    """Merge the config file over the documented defaults."""
    user: dict = {}
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {}
    for section, defaults in DEFAULT_CONFIG.items():
        if section == "family":
            value = user.get(section, defaults)
            if isinstance(value, str):
                value = {"family": value}
            if not isinstance(value, dict):
                raise ConfigError("config section 'family' must be a name or an object")
            cfg[section] = value
        else:
            override = user.get(section, {})
            if not isinstance(override, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            cfg[section] = _merge_section(defaults, override, section)
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _provenance(cfg: dict, seed: int) -> dict:
    return {"config_sha256": config_digest(cfg), "seed": seed}


def _apply_global_seed(cfg: dict, seed: Optional[int]) -> dict:
    if seed is None:
        return cfg
    cfg = json.loads(json.dumps(cfg))
    for section in ("data", "train", "verify", "simulate", "bench"):
        cfg[section]["seed"] = seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_config(section: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=section["learning_rate"],
        batch_size=section["batch_size"],
        max_epochs=section["max_epochs"],
        patience=section["patience"],
        validation_fraction=section["validation_fraction"],
        seed=section["seed"],
    )


def _verification_config(section: dict) -> VerificationConfig:
    return VerificationConfig(
        epsilon=section["epsilon"],
        beta=section["beta"],
        gamma=section["gamma"],
        epsilon_primal=section["epsilon_primal"],
        epsilon_dual=section["epsilon_dual"],
        beta_primal=section["beta_primal"],
        beta_dual=section["beta_dual"],
        gamma_primal=section["gamma_primal"],
        gamma_dual=section["gamma_dual"],
        feasibility_tol=section["feasibility_tol"],
        solver_tolerance=section["solver_tolerance"],
        seed=section["seed"],
    )


def _load_policies(out: Path):
    primal_path = out / "policy_primal.json"
    dual_path = out / "policy_dual.json"
    for p in (primal_path, dual_path):
        if not p.exists():
            raise ConfigError(f"missing policy file {p}; run the train command first")
    return load_policy(primal_path), load_policy(dual_path)


def cmd_gen_data(cfg: dict, args) -> int:
    out = _out_dir(args)
    section = dict(cfg["data"])
    if args.m is not None:
        section["m"] = args.m
    system, spec, box = load_family_config(cfg["family"])
    opts = SolverOptions(tolerance=section["solver_tolerance"])
    data = generate_dataset(system, spec, box, section["m"], section["seed"],
                            solver_options=opts)
    data.to_csv(out / "dataset.csv")
    report = {
        **_provenance(cfg, section["seed"]),
        "family": system.name,
        "records": len(data),
        "provenance": data.provenance,
        "parameter_dim": box.dim,
        "input_sequence_dim": int(data.U.shape[1]),
        "multiplier_dim": int(data.lam.shape[1]),
    }
    _write_json(out / "gen_report.json", report)
    print(f"wrote {len(data)} records to {out / 'dataset.csv'}")
    return 0


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(args)
    section = cfg["train"]
    dataset_path = out / "dataset.csv"
    if not dataset_path.exists():
        raise ConfigError(f"missing dataset {dataset_path}; run the gen-data command first")
    data = Dataset.from_csv(dataset_path)
    tc = _train_config(section)
    pol_p = train(data, "primal", section["primal_widths"], tc)
    pol_d = train(data, "dual", section["dual_widths"], tc)
    save_policy(pol_p, out / "policy_primal.json")
    save_policy(pol_d, out / "policy_dual.json")
    report = {
        **_provenance(cfg, section["seed"]),
        "primal": pol_p.info,
        "dual": pol_d.info,
        "primal_widths": list(pol_p.widths),
        "dual_widths": list(pol_d.widths),
    }
    _write_json(out / "train_report.json", report)
    print(f"trained policies saved to {out} "
          f"(primal val loss {pol_p.info.get('best_val_loss'):.3e}, "
          f"dual val loss {pol_d.info.get('best_val_loss'):.3e})")
    return 0


def cmd_verify(cfg: dict, args) -> int:
    out = _out_dir(args)
    section = cfg["verify"]
    vc = _verification_config(section)
    system, spec, box = load_family_config(cfg["family"])
    family = (system, spec)
    n_p = required_sample_size(vc.epsilon_primal, vc.beta_primal)
    n_d = required_sample_size(vc.epsilon_dual, vc.beta_dual)
    print(f"N_p = {n_p}, N_d = {n_d}")

    if args.oracle:
        pol_p, pol_d = make_oracle_policies(family, box)
        report = run_verification(pol_p, pol_d, family, box, vc,
                                  eval_samples=section["eval_samples"], jobs=args.jobs)
    elif args.retrain:
        dataset_path = out / "dataset.csv"
        if not dataset_path.exists():
            raise ConfigError(f"missing dataset {dataset_path}; run the gen-data command first")
        data = Dataset.from_csv(dataset_path)
        tc = _train_config(cfg["train"])
        outcome = train_until_verified(
            family, box, data,
            cfg["train"]["primal_widths"], cfg["train"]["dual_widths"],
            train_cfg=tc, ver_cfg=vc,
            max_attempts=section["max_attempts"], jobs=args.jobs)
        save_policy(outcome.primal, out / "policy_primal.json")
        save_policy(outcome.dual, out / "policy_dual.json")
        report = outcome.report
        report.config["retrain_attempts"] = outcome.attempts
    else:
        pol_p, pol_d = _load_policies(out)
        report = run_verification(pol_p, pol_d, family, box, vc,
                                  eval_samples=section["eval_samples"], jobs=args.jobs)

    doc = report.to_dict()
    doc.update(_provenance(cfg, section["seed"]))
    _write_json(out / "verification_report.json", doc)
    print(f"primal: {'pass' if report.primal.passed else 'FAIL'} "
          f"({len(report.primal.violations)} violations / {report.primal.n_evaluated} samples)")
    print(f"dual:   {'pass' if report.dual.passed else 'FAIL'} "
          f"({len(report.dual.violations)} violations / {report.dual.n_evaluated} samples)")
    if report.stats is not None:
        st = report.stats
        print(f"empirical rates over {st.n} samples: "
              f"primal {st.rate_primal:.6f}, dual {st.rate_dual:.6f}, "
              f"combined {st.rate_combined:.6f}")
    print(report.statement if report.passed else "verification FAILED")
    return 0 if report.passed else 1


def cmd_simulate(cfg: dict, args) -> int:
    out = _out_dir(args)
    section = dict(cfg["simulate"])
    if args.steps is not None:
        section["steps"] = args.steps
    if args.gamma is not None:
        section["gamma"] = args.gamma
    if args.audit:
        section["audit"] = True
    system, spec, box = load_family_config(cfg["family"])
    if args.oracle:
        pol_p, pol_d = make_oracle_policies((system, spec), box)
    else:
        pol_p, pol_d = _load_policies(out)
    ctrl = CertifiedController(
        system=system, spec=spec, box=box, primal=pol_p, dual=pol_d,
        gamma=section["gamma"], feasibility_tol=section["feasibility_tol"])
    if section["equilibrium"]:
        scenario = make_equilibrium_scenario(box, section["steps"])
    else:
        scenario = make_random_scenario(box, section["steps"], section["seed"])
    log = simulate(ctrl, scenario, audit=section["audit"])
    log.to_csv(out / "steps.csv")
    log.to_jsonl(out / "steps.jsonl")
    summary = log.summary()
    summary.update(_provenance(cfg, section["seed"]))
    _write_json(out / "sim_summary.json", summary)
    print(f"{summary['steps']} steps: {summary['certified_steps']} certified, "
          f"{summary['fallback_steps']} fallback "
          f"(rate {summary['fallback_rate']:.3f}), "
          f"max certified gap {summary['max_certified_gap']}")
    if log.aborted:
        print(f"aborted: {log.abort_info}")
    return 0


def cmd_bench(cfg: dict, args) -> int:
    out = _out_dir(args)
    section = dict(cfg["bench"])
    if args.repetitions is not None:
        section["repetitions"] = args.repetitions
    if args.samples is not None:
        section["samples"] = args.samples
    system, spec, box = load_family_config(cfg["family"])
    if args.oracle:
        pol_p, pol_d = make_oracle_policies((system, spec), box)
    else:
        pol_p, pol_d = _load_policies(out)
    ctrl = CertifiedController(system=system, spec=spec, box=box,
                               primal=pol_p, dual=pol_d, gamma=section["gamma"])
    samples = sample_parameters(box, section["samples"], section["seed"])
    stats = benchmark_timing(ctrl, samples, repetitions=section["repetitions"],
                             warmup=section["warmup"])
    doc = stats.to_dict()
    doc.update(_provenance(cfg, section["seed"]))
    _write_json(out / "timing.json", doc)
    table = stats.render_table()
    with open(out / "timing.txt", "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdmpc",
        description="Learned MPC policies with duality-gap certificates: "
                    "dataset generation, training, randomized verification, "
                    "certified simulation, and timing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override every section seed")
        p.add_argument("--out", default="runs/default", help="artifact directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for per-sample verification work")

    p = sub.add_parser("gen-data", help="sample parameters and label them with the exact solver")
    common(p)
    p.add_argument("--m", type=int, default=None, help="override dataset size")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit primal and dual networks to a dataset")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="randomized verification of trained policies")
    common(p)
    p.add_argument("--oracle", action="store_true",
                   help="verify exact-solver wrappers instead of trained policies")
    p.add_argument("--retrain", action="store_true",
                   help="retrain with doubled widths until verification passes")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="closed-loop certified control run")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--audit", action="store_true",
                   help="solve every step exactly for ground-truth comparison")
    p.add_argument("--oracle", action="store_true",
                   help="use exact-solver wrappers as policies")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="time the certified path against the solver")
    common(p)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--oracle", action="store_true",
                   help="use exact-solver wrappers as policies")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        cfg = _apply_global_seed(cfg, args.seed)
        return args.func(cfg, args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
