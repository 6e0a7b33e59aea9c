import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gaitdis.classifiers import MODELS, CnnConfig, EvalSettings, SvmConfig, run_benchmark
from gaitdis.cli import EFFECTIVE_CONFIG, RunConfig, parse_models, run_subcommand
from gaitdis.model import ModelConfig, init_params

SMALL = {
    "synth": {"n_subjects": 2, "cycles_per_pair": 4},
    "model": {"encoder": [[8, 7, 4], [8, 5, 4]]},
    "train": {"epochs": 2, "batch_size": 4, "steps_per_epoch": 1},
    "eval": {"folds": 2, "svm": {"epochs": 5}, "cnn": {"channels": [4, 4], "epochs": 2, "latent_epochs": 5}},
    "explain": {"folds": 2},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def last_error(capsys) -> str:
    return capsys.readouterr().err.strip().splitlines()[-1]


# --- run configuration ----------------------------------------------------------

def test_run_config_defaults_echo_round_trip():
    cfg = RunConfig()
    echoed = cfg.to_json()
    assert echoed["train"]["epochs"] == 200 and echoed["synth"]["rng_seed"] == 7
    assert echoed["eval"]["models"] == list(MODELS)
    assert RunConfig.from_json(json.loads(json.dumps(echoed))).to_json() == echoed


@pytest.mark.parametrize("bad", [{"optimizer": {}}, {"train": {"epochz": 3}}, {"model": {"width": 2}},
                                 {"synth": {"colour": 1}}, {"preprocess": {"smooth": 1}},
                                 {"loss": {"kl": 1.0}}, {"eval": {"models": "rf-man"}},
                                 {"explain": {"style": 1}}])
def test_run_config_unknown_keys_rejected(bad):
    with pytest.raises(ValueError):
        RunConfig.from_json(bad)


def test_parse_models():
    assert parse_models("AE-xyz, svm-man") == ["ae-xyz", "svm-man"]
    with pytest.raises(ValueError):
        parse_models("")


def test_effective_config_written(tmp_path, small_config):
    assert run_subcommand(["synth", "--config", small_config, "--seed", "5", "--out", str(tmp_path / "d")]) == 0
    echoed = json.loads((tmp_path / "d" / EFFECTIVE_CONFIG).read_text())
    assert echoed["synth"]["rng_seed"] == 5 and echoed["synth"]["n_subjects"] == 2
    # defaults that the file did not mention are echoed too
    assert echoed["loss"]["margin"] == 0.2 and echoed["train"]["lr"] == 0.001


# --- exit codes -------------------------------------------------------------------

def test_unknown_flag_is_usage_error(capsys, tmp_path):
    assert run_subcommand(["synth", "--out", str(tmp_path), "--bogus"]) == 2
    assert last_error(capsys).startswith("error: usage:")


def test_unknown_subcommand_and_missing_required(capsys):
    assert run_subcommand(["frobnicate"]) == 2
    assert run_subcommand(["train", "--cycles", "x"]) == 2
    assert "--out" in last_error(capsys)


def test_missing_manifest_names_flag(capsys, tmp_path):
    code = run_subcommand(["preprocess", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "c")])
    assert code == 2
    assert "--manifest" in last_error(capsys)


def test_bad_config_is_usage_error(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochz": 1}}))
    assert run_subcommand(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "epochz" in last_error(capsys)
    cfg.write_text("{not json")
    assert run_subcommand(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_runtime_failure_exit_one(capsys, tmp_path):
    bad = tmp_path / "corrupt.gdae"
    bad.write_bytes(b"not a checkpoint")
    cycles = tmp_path / "cycles"
    cycles.mkdir()
    assert run_subcommand(["privacy", "--cycles", str(cycles), "--ckpt", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = last_error(capsys)
    assert err.startswith("error: ") and not err.startswith("error: usage")


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "gaitdis", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "synth" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "gaitdis", "eval"], capture_output=True, text=True)
    assert bad.returncode == 2 and bad.stderr.strip().splitlines()[-1].startswith("error: usage:")


# --- determinism -----------------------------------------------------------------

def test_synth_seed_determinism(tmp_path, small_config):
    for d in ("a", "b"):
        assert run_subcommand(["synth", "--config", small_config, "--seed", "3", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def csv_files(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


def test_all_twice_byte_identical(tmp_path, small_config):
    for d in ("r1", "r2"):
        assert run_subcommand(["all", "--config", small_config, "--seed", "7", "--out", str(tmp_path / d)]) == 0
    files = csv_files(tmp_path / "r1")
    assert files == csv_files(tmp_path / "r2")
    for sub in ("eval/eval_ae-xyz.csv", "privacy/privacy.csv", "explain/joint_contributions.csv",
                "model/train_report.csv"):
        assert Path(sub) in files
    for f in files:
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes(), f
    for svg in ("privacy/privacy.svg", "explain/joint_contributions.svg"):
        assert (tmp_path / "r1" / svg).read_bytes() == (tmp_path / "r2" / svg).read_bytes()
    summary = (tmp_path / "r1" / "summary.md").read_text()
    assert "ae-xyz" in summary and "a-codes" in summary


def test_stagewise_subcommands_and_report(tmp_path, small_config):
    run = tmp_path / "run"
    c = ["--config", small_config]
    assert run_subcommand(["synth", *c, "--out", str(run / "data")]) == 0
    assert run_subcommand(["preprocess", *c, "--manifest", str(run / "data" / "manifest.json"),
                           "--out", str(run / "cycles")]) == 0
    assert run_subcommand(["train", *c, "--cycles", str(run / "cycles"), "--epochs", "1",
                           "--out", str(run / "model" / "ae.gdae")]) == 0
    ckpt = str(run / "model" / "ae.gdae")
    assert run_subcommand(["eval", *c, "--cycles", str(run / "cycles"), "--ckpt", ckpt,
                           "--models", "svm-xyz,ae-xyz", "--out", str(run / "eval")]) == 0
    assert run_subcommand(["explain", *c, "--cycles", str(run / "cycles"), "--ckpt", ckpt, "--per-sample",
                           "--classifier", str(run / "eval" / "ae_xyz_classifier.gdae"),
                           "--out", str(run / "explain")]) == 0
    assert (run / "explain" / "attributions.npz").is_file()
    assert run_subcommand(["report", "--run", str(run)]) == 0
    summary = (run / "summary.md").read_text()
    assert "| knn-man | missing" in summary and "run `privacy` first" in summary


# --- threads ---------------------------------------------------------------------

def test_thread_count_does_not_change_results(monkeypatch, small_cycles):
    settings = EvalSettings(folds=3, svm=SvmConfig(epochs=5), cnn=CnnConfig(epochs=1, latent_epochs=3))
    ae = init_params(ModelConfig(), 0)
    out = {}
    for n in ("1", "4"):
        monkeypatch.setenv("GAITDIS_THREADS", n)
        out[n] = run_benchmark(small_cycles, ae, ["svm-xyz", "ae-xyz"], seed=2, settings=settings)
    for m in out["1"]:
        np.testing.assert_array_equal(out["1"][m].pooled.confusion, out["4"][m].pooled.confusion)


def test_invalid_thread_env_is_reported(monkeypatch, capsys, tmp_path, small_config):
    run = tmp_path / "run"
    assert run_subcommand(["synth", "--config", small_config, "--out", str(run / "data")]) == 0
    assert run_subcommand(["preprocess", "--config", small_config, "--manifest", str(run / "data" / "manifest.json"),
                           "--out", str(run / "cycles")]) == 0
    monkeypatch.setenv("GAITDIS_THREADS", "lots")
    code = run_subcommand(["eval", "--config", small_config, "--cycles", str(run / "cycles"), "--ckpt", "unused",
                           "--models", "svm-xyz", "--out", str(run / "eval")])
    assert code == 1 and "GAITDIS_THREADS" in last_error(capsys)
