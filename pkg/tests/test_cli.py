import subprocess
import sys

import pytest

from echoact.cli import main
from echoact.formats import read_profile

SMALL = """\
scene_class=chew
duration=4
n_groups=2
seconds_per_class=2.5
batch_size=8
pretrain_epochs=1
finetune_epochs=2
stage2_epochs=1
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, dict(line.split("=", 1) for line in out.splitlines() if "=" in line), out, err


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.cfg"
    path.write_text(SMALL)
    return path


def test_front_end_stages(capsys, tmp_path, cfg_file):
    code, kv, _, _ = run(capsys, "synth", "--config", cfg_file, "--out", tmp_path)
    assert code == 0 and kv["n_samples"] == "600"
    code, kv, _, _ = run(capsys, "simulate", "--config", cfg_file, "--out", tmp_path)
    assert code == 0 and int(kv["sweeps"]) == 333
    code, kv, _, _ = run(capsys, "echo", "--config", cfg_file, "--out", tmp_path)
    assert code == 0 and kv["lags"] == "600"
    profile, meta = read_profile(tmp_path / "profile.aepf")
    assert profile.data.shape[0] == 4 and meta["kind"] == "profile"
    code, kv, _, _ = run(capsys, "flow", "--config", cfg_file, "--out", tmp_path)
    assert code == 0 and int(kv["windows"]) == 3  # (332 - 166) // 83 + 1
    assert len(list((tmp_path / "windows").glob("*.aefw"))) == 3
    assert (tmp_path / "truth.csv").read_text().startswith("#")


def test_same_seed_gives_byte_identical_outputs(capsys, tmp_path, cfg_file):
    for name in ("a", "b"):
        for stage in ("synth", "simulate", "echo", "flow"):
            assert run(capsys, stage, "--config", cfg_file, "--seed", 7, "--out", tmp_path / name)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) >= 8
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    run(capsys, "simulate", "--config", cfg_file, "--seed", 8, "--out", tmp_path / "c")
    assert (tmp_path / "c" / "mic.wav").read_bytes() != (tmp_path / "a" / "mic.wav").read_bytes()


@pytest.mark.slow
def test_learning_stages(capsys, tmp_path, cfg_file):
    out = tmp_path
    code, kv, _, _ = run(capsys, "dataset", "--synthetic", "--config", cfg_file, "--out", out)
    assert code == 0 and kv["groups"] == "G01,G02" and int(kv["windows"]) == 16
    code, kv, _, _ = run(capsys, "pretrain", "--config", cfg_file, "--out", out)
    assert code == 0 and kv["epochs"] == "1"
    code, kv, _, _ = run(capsys, "finetune", "--config", cfg_file, "--out", out, "--encoder", out / "encoder.amdl")
    assert code == 0 and kv["degenerate"] == "False"
    assert (out / "finetune_log.csv").read_text().count("\n") == 3

    for stage in ("simulate", "echo", "flow"):
        assert run(capsys, stage, "--config", cfg_file, "--out", out)[0] == 0
    code, kv, text, _ = run(capsys, "predict", "--config", cfg_file, "--out", out)
    assert code == 0 and kv["count"] == "3"
    assert len([l for l in text.splitlines() if l.count(",") == 2]) == 3

    window = sorted((out / "windows").glob("*.aefw"))[0]
    code, kv, _, _ = run(capsys, "saliency", "--config", cfg_file, "--out", out, "--model", out / "model.amdl",
                         "--window", window, "--class", "chew", "--patch", 32)
    assert code == 0 and -1 <= float(kv["spearman"]) <= 1
    assert (out / "saliency" / f"{window.stem}_gradcam.csv").exists()

    code, kv, text, _ = run(capsys, "eval-lopo", "--config", cfg_file, "--out", out, "--no-pretrain")
    assert code == 0 and 0 <= float(kv["macro_f1"]) <= 1
    assert (out / "report" / "summary.json").exists() and text.startswith("G01,")


def test_bench(capsys):
    code, kv, _, _ = run(capsys, "bench", "--seconds", 2.1, "--repeats", 1)
    assert code == 0 and kv["frames"] == "174" and float(kv["realtime_factor"]) > 0


def test_unknown_subcommand_is_a_usage_error(capsys):
    code, _, out, err = run(capsys, "transmogrify")
    assert code == 1 and out == "" and err.startswith("ERR:")


def test_missing_inputs_are_data_errors(capsys, tmp_path):
    code, _, _, err = run(capsys, "echo", "--out", tmp_path)
    assert code == 2 and err.startswith("ERR:") and "mic.wav" in err
    code, _, _, err = run(capsys, "predict", "--out", tmp_path)
    assert code == 2 and err.startswith("ERR:")


def test_bad_config_is_a_usage_error(capsys, tmp_path):
    (tmp_path / "bad.cfg").write_text("no_such_key=1\n")
    code, _, _, err = run(capsys, "synth", "--config", tmp_path / "bad.cfg", "--out", tmp_path)
    assert code == 1 and "no_such_key" in err


def test_dataset_without_sources_is_a_usage_error(capsys, tmp_path):
    code, _, _, err = run(capsys, "dataset", "--out", tmp_path)
    assert code == 1 and err.startswith("ERR:")


def test_console_entry_point_runs_as_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "echoact.cli", "synth", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "chirp_left=" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "echoact.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("echoact ")
