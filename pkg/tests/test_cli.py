import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image
from typer.testing import CliRunner

from modules.cli import app
from modules.data import dataset_fingerprint

runner = CliRunner()

# desk a 32 px con una sola capa Transformer para que la CLI corra rápido
FAST = ["--preset", "desk", "--input-size", "32", "--batch", "8", "--no-augment"]


def _read_config(path):
    pairs = (line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines())
    return dict(pairs)


# ==============================
# synth
# ==============================

def test_synth_writes_layout_and_is_reproducible(tmp_path):
    args = ["synth", "--count", "12", "--size", "32", "--seed", "7", "--test-count", "4", "--test-cases", "2"]
    result = runner.invoke(app, args + ["--out", str(tmp_path / "a")])
    assert result.exit_code == 0, result.output
    assert len(list((tmp_path / "a" / "train" / "images").glob("*.png"))) == 12
    assert len(list((tmp_path / "a" / "train" / "masks_nonexpert").glob("*.png"))) == 12
    assert len(list((tmp_path / "a" / "test" / "masks_expert").glob("*.png"))) == 4

    result = runner.invoke(app, args + ["--out", str(tmp_path / "b")])
    assert result.exit_code == 0, result.output
    assert dataset_fingerprint(tmp_path / "a") == dataset_fingerprint(tmp_path / "b")


def test_synth_without_perturbation_gives_identical_masks(tmp_path):
    result = runner.invoke(
        app, ["synth", "--out", str(tmp_path), "--count", "4", "--size", "32", "--perturb", "0", "--test-count", "0"]
    )
    assert result.exit_code == 0, result.output
    for path in (tmp_path / "train" / "masks_expert").glob("*.png"):
        other = tmp_path / "train" / "masks_nonexpert" / path.name
        assert np.array_equal(np.asarray(Image.open(path)), np.asarray(Image.open(other)))
    assert not (tmp_path / "test").exists()


def test_synth_unwritable_path(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    result = runner.invoke(app, ["synth", "--out", str(blocker / "sub"), "--count", "2", "--size", "32"])
    assert result.exit_code == 2


@pytest.mark.parametrize("flags", [["--count", "0"], ["--size", "8"], ["--test-count", "-1"]])
def test_synth_invalid_sizes_exit_2(tmp_path, flags):
    result = runner.invoke(app, ["synth", "--out", str(tmp_path), *flags])
    assert result.exit_code == 2
    assert not (tmp_path / "train").exists()


def test_synth_defaults_to_data_root(tmp_path):
    result = runner.invoke(app, ["synth", "--count", "2", "--size", "32", "--test-count", "0"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "data" / "train" / "images").is_dir()


# ==============================
# train
# ==============================

def test_train_writes_run_directory(tmp_path, synth_root):
    run = tmp_path / "run"
    result = runner.invoke(app, ["train", "--data", str(synth_root), "--out", str(run), "--epochs", "2", *FAST])
    assert result.exit_code == 0, result.output

    log = pd.read_csv(run / "loss_log.csv")
    assert log["epoch"].tolist() == [1, 2]
    assert (run / "checkpoints" / "epoch_002.pt").is_file()

    config = _read_config(run / "config.txt")
    assert config["train.learning_rate"] == "0.01"
    assert config["train.momentum"] == "0.9"
    assert config["train.weight_decay"] == "0.0001"
    assert config["train.loss_kind"] == "adaptive_focal"
    assert config["loss.kernel_size"] == "5"

    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["dataset_fingerprint"] == dataset_fingerprint(synth_root)
    assert set(config) == set(manifest["resolved_config"])


def test_train_focal_alias(tmp_path, synth_root):
    run = tmp_path / "focal"
    result = runner.invoke(
        app,
        ["train", "--data", str(synth_root), "--out", str(run), "--epochs", "1",
         "--loss", "focal", "--gamma-f", "0", "--beta", "1", *FAST],
    )
    assert result.exit_code == 0, result.output
    config = _read_config(run / "config.txt")
    assert config["train.loss_kind"] == "standard_focal"
    assert config["loss.gamma_f"] == "0.0"


def test_train_unknown_loss_lists_valid_names(synth_root):
    result = runner.invoke(app, ["train", "--data", str(synth_root), "--loss", "dice"])
    assert result.exit_code == 2
    for name in ("adaptive_focal", "focal", "ag_bce"):
        assert name in result.output


@pytest.mark.parametrize(
    "flags",
    [
        ["--ks", "4"],
        ["--lr", "0"],
        ["--preset", "huge"],
        ["--input-size", "40"],
        ["--variability-mode", "other"],
    ],
)
def test_train_invalid_configuration_exits_2(synth_root, flags):
    result = runner.invoke(app, ["train", "--data", str(synth_root), "--epochs", "1", *flags])
    assert result.exit_code == 2


def test_train_missing_data(tmp_path):
    result = runner.invoke(app, ["train", "--data", str(tmp_path / "nope")])
    assert result.exit_code == 2


@pytest.mark.parametrize("command", ["train", "eval", "compare"])
@pytest.mark.parametrize("spacing", ["0", "-0.5"])
def test_non_positive_spacing_exits_2(tmp_path, synth_root, command, spacing):
    result = runner.invoke(
        app, [command, "--data", str(synth_root), "--out", str(tmp_path / "out"), "--spacing", spacing]
    )
    assert result.exit_code == 2
    assert "--spacing" in result.output


def test_train_resume_extends_log(tmp_path, synth_root):
    run = tmp_path / "run"
    args = ["train", "--data", str(synth_root), "--out", str(run), *FAST]
    assert runner.invoke(app, args + ["--epochs", "1"]).exit_code == 0
    result = runner.invoke(
        app, args + ["--epochs", "2", "--resume", str(run / "checkpoints" / "epoch_001.pt")]
    )
    assert result.exit_code == 0, result.output
    assert pd.read_csv(run / "loss_log.csv")["epoch"].tolist() == [1, 2]


# ==============================
# eval
# ==============================

def test_eval_writes_metrics_and_overlays(tmp_path, synth_root):
    run = tmp_path / "run"
    assert runner.invoke(app, ["train", "--data", str(synth_root), "--out", str(run), "--epochs", "1", *FAST]).exit_code == 0

    result = runner.invoke(app, ["eval", "--run", str(run), "--data", str(synth_root), "--largest-component"])
    assert result.exit_code == 0, result.output

    df = pd.read_csv(run / "metrics.csv")
    assert df["case_id"].tolist() == ["case002", "case003", "Mean"]
    cases, mean = df.iloc[:-1], df.iloc[-1]
    assert mean["mean_dice"] == pytest.approx(cases["mean_dice"].mean())
    assert mean["slice_count"] == cases["slice_count"].sum()
    overlays = sorted(p.name for p in (run / "overlays").glob("*.png"))
    assert len(overlays) == 4
    with Image.open(run / "overlays" / overlays[0]) as im:
        assert im.mode == "RGB"


def test_eval_missing_checkpoint(tmp_path, synth_root):
    result = runner.invoke(app, ["eval", "--checkpoint", str(tmp_path / "none.pt"), "--data", str(synth_root)])
    assert result.exit_code == 2
    result = runner.invoke(app, ["eval", "--data", str(synth_root)])
    assert result.exit_code == 2


# ==============================
# compare
# ==============================

def test_compare_tables_match_single_runs(tmp_path, synth_root):
    out = tmp_path / "cmp"
    common = ["--data", str(synth_root), "--epochs", "2", "--seed", "3", *FAST]
    result = runner.invoke(app, ["compare", "--out", str(out), *common])
    assert result.exit_code == 0, result.output

    losses = pd.read_csv(out / "comparison_losses.csv")
    assert list(losses.columns) == ["epoch", "adaptive_focal", "standard_focal", "ag_bce"]
    assert len(losses) == 2
    metrics = pd.read_csv(out / "comparison_metrics.csv")
    assert metrics["case_id"].tolist()[-1] == "Mean"
    assert (out / "loss_curves.html").is_file()

    single = tmp_path / "single"
    result = runner.invoke(app, ["train", "--out", str(single), "--loss", "ag_bce", *common])
    assert result.exit_code == 0, result.output
    assert pd.read_csv(single / "loss_log.csv")["mean_loss"].tolist() == losses["ag_bce"].tolist()
