import csv
import json
import time

import numpy as np
import pytest

from c5ed.cli import main
from c5ed.io import read_array_csv, read_pgm, save_checkpoint
from c5ed.network import BranchSpec, LayerSpec, NetworkSpec, build_cascade

SMOKE = ["--preset", "smoke", "--n-phantoms", "8", "--epochs", "2", "--size", "32", "--lr", "1e-3"]


def read(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    started = time.perf_counter()
    code = main(["train", *SMOKE, "--seed", "1", "--out", str(out)])
    return out, code, time.perf_counter() - started


# -- mask ---------------------------------------------------------------------------

def test_mask_example(tmp_path, capsys):
    assert main(["mask", "--width", "320", "--reduction", "4", "--center-fraction", "0.05", "--out", str(tmp_path)]) == 0
    stats = read(tmp_path / "mask.json")
    assert stats["center_width"] == 16 and stats["sampled_columns"] == 80
    mask = read_array_csv(tmp_path / "mask.csv")
    assert mask.shape == (320, 320) and mask[0].sum() == 80
    np.testing.assert_array_equal(read_pgm(tmp_path / "mask.pgm"), (mask * 255).astype(np.uint8))
    assert (tmp_path / "mask.png").stat().st_size > 0
    assert "80 of 320 columns" in capsys.readouterr().out


def test_mask_without_undersampling(tmp_path):
    assert main(["mask", "--width", "40", "--reduction", "1", "--out", str(tmp_path)]) == 0
    assert read(tmp_path / "mask.json")["sampled_fraction"] == 1.0


def test_mask_outputs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["mask", "--width", "64", "--seed", "9", "--out", str(tmp_path / name)]) == 0
    for f in ("mask.pgm", "mask.csv", "mask.json", "mask.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_mask_infeasible_budget(tmp_path, capsys):
    code = main(["mask", "--width", "32", "--reduction", "8", "--center-fraction", "0.5", "--out", str(tmp_path)])
    assert code != 0
    assert "center tile" in capsys.readouterr().err


# -- rf -----------------------------------------------------------------------------

@pytest.mark.parametrize("preset, expected", [("c5ed", [3, 7, 17, 35]), ("ablation", [3, 7, 9, 9])])
def test_rf_presets(preset, expected, tmp_path, capsys):
    assert main(["rf", "--preset", preset, "--out", str(tmp_path)]) == 0
    rows = read(tmp_path / "rf.json")["branches"]
    assert [r["closed_form"] for r in rows] == expected
    assert [r["empirical"] for r in rows] == expected
    assert capsys.readouterr().out.count("PASS") == 4


def test_rf_hand_written_spec(tmp_path, capsys):
    spec = NetworkSpec(branches=[BranchSpec([LayerSpec(3, 1, 4), LayerSpec(3, 2, 4)])], cascade_depth=1)
    spec.save(tmp_path / "spec.json")
    assert main(["rf", "--spec", str(tmp_path / "spec.json")]) == 0
    out = capsys.readouterr().out
    assert "      7      7  PASS" in out


def test_rf_unparseable_spec(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["rf", "--spec", str(tmp_path / "bad.json")]) != 0
    assert "cannot read network spec" in capsys.readouterr().err


# -- train --------------------------------------------------------------------------

def test_smoke_training_run(trained):
    out, code, seconds = trained
    assert code == 0
    assert seconds < 60
    for f in ("manifest.json", "history.csv", "metrics.json", "history.png", "reconstructions.png",
              "checkpoint/spec.json", "checkpoint/weights.bin", "checkpoint/weights.json"):
        assert (out / f).is_file(), f
    rows = list(csv.DictReader((out / "history.csv").open()))
    assert len(rows) == 2
    manifest = read(out / "manifest.json")
    assert manifest["command"] == "train"
    assert manifest["train_config"]["epochs"] == 2 and manifest["spec"]["name"] == "smoke"
    metrics = read(out / "metrics.json")
    assert {"psnr", "ms_ssim", "zero_filled_psnr", "zero_filled_ms_ssim"} <= metrics["test"].keys()


def test_replay_reproduces_training_bytes(trained, tmp_path):
    out, _, _ = trained
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path)]) == 0
    for f in ("history.csv", "metrics.json", "checkpoint/weights.bin"):
        assert (tmp_path / f).read_bytes() == (out / f).read_bytes(), f


def test_complex_mode_reports_parameter_counts(tmp_path):
    assert main(["train", *SMOKE, "--mode", "complex", "--epochs", "1", "--phase-mode", "smooth",
                 "--out", str(tmp_path)]) == 0
    metrics = read(tmp_path / "metrics.json")
    real = build_cascade(NetworkSpec.from_dict({**read(tmp_path / "checkpoint" / "spec.json"),
                                                "mode": "real", "image_channels": 1}))
    assert metrics["matched_real_parameters"] == sum(p.size for p in real.parameters())
    bn_channels = sum(p.size for n, p in real.named_parameters() if n.endswith(".gamma"))
    assert metrics["parameters"] == 2 * metrics["matched_real_parameters"] + bn_channels
    assert "phase_rmse" in metrics["test"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_nonzero_and_keeps_artifacts(tmp_path, capsys):
    code = main(["train", *SMOKE, "--lr", "1e300", "--out", str(tmp_path)])
    assert code != 0
    assert "diverged" in capsys.readouterr().err
    assert (tmp_path / "manifest.json").is_file()
    assert (tmp_path / "history.csv").is_file()


# -- eval ---------------------------------------------------------------------------

def test_eval_on_validation_reproduces_best_val_psnr(trained, tmp_path):
    out, _, _ = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--seed", "1", "--split", "val",
                 "--out", str(tmp_path)]) == 0
    metrics = read(tmp_path / "metrics.json")
    history = list(csv.DictReader((out / "history.csv").open()))
    best = read(out / "metrics.json")["best_epoch"]
    assert abs(metrics["psnr"] - float(history[best - 1]["val_psnr"])) < 1e-9
    assert "zero_filled_psnr" in metrics and len(metrics["per_image"]) == len(metrics["indices"])
    i = metrics["indices"][0]
    for kind in ("input", "output", "target", "error"):
        assert read_pgm(tmp_path / "images" / f"{i:03d}_{kind}.pgm").shape == (32, 32)


def test_eval_full_mask_gives_infinite_baseline(trained, tmp_path):
    out, _, _ = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--reduction", "1", "--out", str(tmp_path)]) == 0
    assert read(tmp_path / "metrics.json")["zero_filled_psnr"] == "inf"


def test_eval_size_mismatch(trained, tmp_path, capsys):
    out, _, _ = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--size", "48", "--out", str(tmp_path)]) != 0
    assert "32x32" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) != 0


def test_eval_replay_is_byte_identical(trained, tmp_path):
    out, _, _ = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--out", str(tmp_path / "a")]) == 0
    assert main(["replay", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


# -- branches -----------------------------------------------------------------------

def test_branches_writes_one_image_per_branch(trained, tmp_path):
    out, _, _ = trained
    assert main(["branches", "--checkpoint", str(out / "checkpoint"), "--image-seed", "4", "--out", str(tmp_path)]) == 0
    images = [read_pgm(tmp_path / f"branch_{i}.pgm") for i in range(1, 5)]
    assert not (tmp_path / "branch_5.pgm").exists()
    assert all(img.shape == read_pgm(tmp_path / "input.pgm").shape for img in images)
    distances = read(tmp_path / "branches.json")["pairwise_l2"]
    assert len(distances) == 6 and all(d > 0 for d in distances.values())


def test_branches_rejects_single_branch_model(tmp_path, capsys):
    spec = NetworkSpec(branches=[BranchSpec.from_dilations([1], 2)], cascade_depth=1, refinement_filters=(2, 2))
    save_checkpoint(tmp_path / "ck", build_cascade(spec), {"image_size": 16})
    assert main(["branches", "--checkpoint", str(tmp_path / "ck"), "--out", str(tmp_path / "o")]) != 0
    assert "not an ensemble" in capsys.readouterr().err


# -- ablation -----------------------------------------------------------------------

def test_ablation_command(tmp_path):
    code = main(["ablation", "--preset", "smoke", "--n-phantoms", "8", "--size", "16", "--epochs", "1",
                 "--seeds", "0", "1", "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert [r["seed"] for r in rows] == ["0", "1"]
    for r in rows:
        assert float(r["delta"]) == pytest.approx(float(r["dilated_psnr"]) - float(r["ablation_psnr"]))
    assert (tmp_path / "ablation.png").is_file()
