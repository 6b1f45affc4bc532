import json
import subprocess
import sys

import numpy as np
import pytest

from edgecare import cli, datagen, nn, transfer


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.mark.parametrize("command", ["datagen", "train", "finetune", "budget", "simulate", "evaluate"])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as exc:
        run(command, "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out"):
        assert flag in text


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "edgecare", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "edgecare" in proc.stdout


def test_budget_prints_reference_values(capsys):
    assert run("budget", "--policy", "case3") == 0
    out = capsys.readouterr().out
    assert "264369" in out and "1223373" in out and "591363" in out


def test_config_error_is_one_json_line(capsys):
    assert run("budget", "--policy", "nonexistent") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and json.loads(err[0])["exit_code"] == 2


def test_missing_seed_is_config_error(tmp_path):
    assert run("datagen", "--out", tmp_path) == 2


def test_data_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.tlec"
    bad.write_bytes(b"JUNKJUNKJUNKJUNK")
    assert run("finetune", "--seed", 0, "--out", tmp_path / "o", "--checkpoint", bad) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "data"


def test_datagen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("datagen", "--seed", 4, "--out", tmp_path / name, "--frames-per-class", 48,
                   "--segment-len", 16) == 0
    assert (tmp_path / "a/stream.tlds").read_bytes() == (tmp_path / "b/stream.tlds").read_bytes()
    ma, mb = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in "ab")
    assert ma["artifacts"] == mb["artifacts"] and ma["seeds"] == {"seed": 4}
    assert len(list((tmp_path / "a").glob("manifest*.json"))) == 1


def test_train_zero_epochs_writes_initialisation(tmp_path):
    assert run("train", "--seed", 3, "--out", tmp_path, "--epochs", 0, "--frames-per-class", 48,
               "--segment-len", 16) == 0
    ck = transfer.load_checkpoint(tmp_path / "model.tlec")
    init = nn.init_model(transfer.reference_architecture(5), np.random.default_rng(3))
    for layer, slot, arr in init.state_arrays():
        assert ck.weights[f"{layer}.{slot}"].tobytes() == arr.tobytes()


def test_config_file_supplies_settings_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames-per-class": 32, "segment_len": 16, "domain": "source", "seed": 1}))
    assert run("datagen", "--config", cfg, "--out", tmp_path / "a") == 0
    assert len(datagen.load_stream(tmp_path / "a/stream.tlds")) == 5 * 32
    assert run("datagen", "--config", cfg, "--out", tmp_path / "b", "--frames-per-class", 16) == 0
    assert len(datagen.load_stream(tmp_path / "b/stream.tlds")) == 5 * 16
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert run("datagen", "--config", cfg, "--seed", 0, "--out", tmp_path / "c") == 2


def test_pipeline_train_finetune_evaluate(tmp_path):
    common = ["--frames-per-class", 48, "--segment-len", 16, "--channels", 1]
    assert run("train", "--seed", 0, "--out", tmp_path / "cloud", "--epochs", 1, *common) == 0
    assert run("finetune", "--seed", 0, "--out", tmp_path / "edge", "--checkpoint", tmp_path / "cloud/model.tlec",
               "--epochs", 1, "--policy", "case2", *common) == 0
    budget = json.loads((tmp_path / "edge/budget.json").read_text())
    assert budget["trainable"] < budget["total"]
    assert run("datagen", "--seed", 9, "--out", tmp_path / "test", *common) == 0
    assert run("evaluate", "--out", tmp_path / "eval", "--checkpoint", tmp_path / "edge/model.tlec",
               "--data", tmp_path / "test/stream.tlds") == 0
    report = json.loads((tmp_path / "eval/report.json").read_text())
    assert 0.0 <= report["mean_ap"] <= 1.0 and report["num_frames"] == 144
    # channel mismatch between stream and checkpoint is a data error
    assert run("datagen", "--seed", 9, "--out", tmp_path / "rgb", "--frames-per-class", 48,
               "--segment-len", 16) == 0
    assert run("evaluate", "--out", tmp_path / "eval2", "--checkpoint", tmp_path / "edge/model.tlec",
               "--data", tmp_path / "rgb/stream.tlds") == 3


def test_simulate_writes_artifacts(tmp_path):
    from test_sim import tiny_scenario
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps(tiny_scenario()))
    assert run("simulate", "--seed", 0, "--out", tmp_path / "sim", "--scenario", scenario) == 0
    names = {p.name for p in (tmp_path / "sim").iterdir()}
    assert {"event_log.jsonl", "ledger.json", "report.json", "edge_model.tlec", "manifest.json"} <= names
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert run("simulate", "--seed", 0, "--out", tmp_path / "x", "--scenario", broken) == 2
