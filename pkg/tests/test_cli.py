"""Command-line workflow: artifacts, exit codes, reproducibility."""

import json

import pytest

from pdmpc.cli import main

TINY = {
    "data": {"m": 60, "seed": 0},
    "train": {"primal_widths": [10, 10], "dual_widths": [4],
              "max_epochs": 250, "patience": 100, "seed": 0},
    "verify": {"epsilon": 0.3, "beta": 0.1, "gamma": 1.0, "seed": 0},
    "simulate": {"steps": 8, "seed": 1},
    "bench": {"samples": 3, "repetitions": 5, "warmup": 1, "seed": 2},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _run(*argv):
    return main(list(argv))


def test_full_pipeline(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "run")

    assert _run("gen-data", "--config", tiny_config, "--out", out) == 0
    assert (tmp_path / "run" / "dataset.csv").exists()
    gen_report = json.loads((tmp_path / "run" / "gen_report.json").read_text())
    assert gen_report["records"] == 60
    assert "config_sha256" in gen_report

    assert _run("train", "--config", tiny_config, "--out", out) == 0
    assert (tmp_path / "run" / "policy_primal.json").exists()
    assert (tmp_path / "run" / "policy_dual.json").exists()
    train_report = json.loads((tmp_path / "run" / "train_report.json").read_text())
    assert train_report["config_sha256"] == gen_report["config_sha256"]

    assert _run("verify", "--config", tiny_config, "--out", out) == 0
    captured = capsys.readouterr().out
    assert "N_p = " in captured and "N_d = " in captured
    report = json.loads((tmp_path / "run" / "verification_report.json").read_text())
    assert report["passed"] is True
    assert report["fingerprints"]["primal"].startswith("sha256:")
    assert report["config_sha256"] == gen_report["config_sha256"]

    assert _run("simulate", "--config", tiny_config, "--out", out) == 0
    summary = json.loads((tmp_path / "run" / "sim_summary.json").read_text())
    assert summary["steps"] == 8
    assert (tmp_path / "run" / "steps.csv").exists()
    assert (tmp_path / "run" / "steps.jsonl").exists()

    assert _run("bench", "--config", tiny_config, "--out", out) == 0
    timing = json.loads((tmp_path / "run" / "timing.json").read_text())
    assert timing["speedup"] > 0
    assert "policy" in (tmp_path / "run" / "timing.txt").read_text()


def test_gen_data_defaults_with_m_override(tmp_path):
    out = str(tmp_path / "d")
    assert _run("gen-data", "--m", "3", "--out", out) == 0
    lines = (tmp_path / "d" / "dataset.csv").read_text().strip().splitlines()
    assert len(lines) == 4  # header + 3 records


def test_reruns_are_byte_identical(tmp_path, tiny_config):
    out1 = str(tmp_path / "a")
    out2 = str(tmp_path / "b")
    for out in (out1, out2):
        assert _run("gen-data", "--config", tiny_config, "--out", out) == 0
        assert _run("train", "--config", tiny_config, "--out", out) == 0
    for name in ("dataset.csv", "policy_primal.json", "policy_dual.json"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name


def test_global_seed_changes_dataset(tmp_path, tiny_config):
    out1 = str(tmp_path / "s0")
    out2 = str(tmp_path / "s9")
    assert _run("gen-data", "--config", tiny_config, "--out", out1) == 0
    assert _run("gen-data", "--config", tiny_config, "--seed", "9", "--out", out2) == 0
    a = (tmp_path / "s0" / "dataset.csv").read_bytes()
    b = (tmp_path / "s9" / "dataset.csv").read_bytes()
    assert a != b


def test_verify_oracle_mode(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "o")
    assert _run("verify", "--config", tiny_config, "--oracle", "--out", out) == 0
    report = json.loads((tmp_path / "o" / "verification_report.json").read_text())
    assert report["passed"] is True
    assert report["fingerprints"]["primal"].startswith("callable:")
    assert "confidence" in capsys.readouterr().out


def test_verify_failure_exit_code(tmp_path, capsys):
    # one-epoch primal net cannot reach a microscopic gamma: exit code 1
    cfg = json.loads(json.dumps(TINY))
    cfg["train"]["max_epochs"] = 1
    cfg["verify"]["gamma"] = 1e-6
    path = tmp_path / "hopeless.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "h")
    assert _run("gen-data", "--config", str(path), "--out", out) == 0
    assert _run("train", "--config", str(path), "--out", out) == 0
    assert _run("verify", "--config", str(path), "--out", out) == 1
    assert "FAIL" in capsys.readouterr().out
    report = json.loads((tmp_path / "h" / "verification_report.json").read_text())
    assert report["passed"] is False


def test_simulate_oracle_and_gamma_flag(tmp_path, tiny_config):
    out = str(tmp_path / "so")
    assert _run("simulate", "--config", tiny_config, "--oracle", "--audit",
                "--steps", "5", "--out", out) == 0
    summary = json.loads((tmp_path / "so" / "sim_summary.json").read_text())
    assert summary["steps"] == 5
    assert summary["certified_steps"] == 5
    assert summary["max_certified_true_suboptimality"] <= 1e-6


def test_exit_code_two_on_user_errors(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "e")

    # unknown config section
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"lr": 1.0}}))
    assert _run("gen-data", "--config", str(bad), "--out", out) == 2

    # unknown key inside a known section
    bad2 = tmp_path / "bad2.json"
    bad2.write_text(json.dumps({"data": {"samples": 10}}))
    assert _run("gen-data", "--config", str(bad2), "--out", out) == 2

    # malformed JSON
    bad3 = tmp_path / "bad3.json"
    bad3.write_text("{not json")
    assert _run("gen-data", "--config", str(bad3), "--out", out) == 2

    # train without a dataset
    assert _run("train", "--config", tiny_config, "--out", str(tmp_path / "empty")) == 2

    # missing config file
    assert _run("gen-data", "--config", str(tmp_path / "nope.json"), "--out", out) == 2

    err = capsys.readouterr().err
    assert "error:" in err


def test_bench_invalid_repetitions(tmp_path, tiny_config):
    cfg = json.loads(json.dumps(TINY))
    cfg["bench"]["repetitions"] = 0
    path = tmp_path / "bad_bench.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "bb")
    assert _run("bench", "--config", str(path), "--oracle", "--out", out) == 2


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
