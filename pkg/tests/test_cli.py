import json
from unittest.mock import patch

import pandas as pd
import pytest

from src.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from src.gradcheck import GradcheckReport
from src.scene import read_scene
from src.syndata import MANIFEST_NAME
from src.train import CHECKPOINT_NAME, LOG_NAME

SMALL_MODEL = {
    "n_queries": 8,
    "n_layers": 2,
    "points_per_layer": [1, 2],
    "feature_dim": 8,
    "hidden_dim": 8,
    "map_channels": 8,
    "n_classes": 6,
    "encoder": {"width": 8, "depth": 1, "out_channels": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A two-scene dataset and a one-epoch teacher trained through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "train.json"
    config.write_text(json.dumps({"epochs": 3, "batch_size": 2, "lr": 1e-3, "model": SMALL_MODEL}))
    assert main(["gen", "--out", str(root / "data"), "--seed", "3", "--count", "2"]) == EXIT_OK
    assert main(["train", "--role", "teacher", "--data", str(root / "data"), "--out", str(root / "teacher"),
                 "--config", str(config), "--epochs", "1"]) == EXIT_OK
    return root


# ============================================================================
# gen
# ============================================================================

def test_gen_zero_scenes(tmp_path):
    """Test that an empty dataset still gets a manifest."""
    code = main(["gen", "--out", str(tmp_path), "--count", "0"])

    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert code == EXIT_OK
    assert manifest["count"] == 0
    assert manifest["files"] == []


def test_gen_paper_grid(tmp_path):
    """Test that the benchmark grid is written with its dimensions."""
    code = main(["gen", "--out", str(tmp_path), "--count", "1", "--grid", "paper"])

    grid, _ = read_scene(tmp_path / "scene_0000.dsc")
    assert code == EXIT_OK
    assert grid.spec.dims == (60, 60, 36)


def test_gen_rejects_reversed_furniture_range(tmp_path):
    """Test that an invalid recipe is a usage error."""
    code = main(["gen", "--out", str(tmp_path), "--furniture-min", "4", "--furniture-max", "1"])

    assert code == EXIT_USAGE


def test_gen_is_byte_identical_across_runs(tmp_path):
    """Test that the same seed writes the same files."""
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--seed", "11", "--count", "3"]) == EXIT_OK

    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert len(files) == 4
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ============================================================================
# train
# ============================================================================

def test_train_teacher_outputs(workspace):
    """Test that flags override the JSON config and outputs are written."""
    out = workspace / "teacher"
    log = pd.read_json(out / LOG_NAME, lines=True)
    saved = json.loads((out / "train_config.json").read_text())

    assert (out / CHECKPOINT_NAME).exists()
    assert (out / (CHECKPOINT_NAME + ".json")).exists()
    assert len(log) == 1
    assert saved["epochs"] == 1
    assert saved["batch_size"] == 2
    assert saved["model"]["n_queries"] == 8


def test_train_student_without_teacher(workspace, tmp_path):
    """Test that the student role needs a teacher checkpoint."""
    code = main(["train", "--role", "student", "--data", str(workspace / "data"), "--out", str(tmp_path)])

    assert code == EXIT_USAGE


def test_train_student_with_teacher(workspace, tmp_path):
    """Test a distilled student run against the CLI-trained teacher."""
    code = main([
        "train", "--role", "student", "--data", str(workspace / "data"), "--out", str(tmp_path),
        "--config", str(workspace / "train.json"), "--epochs", "1",
        "--teacher-ckpt", str(workspace / "teacher" / CHECKPOINT_NAME),
        "--distill", "efa,ql,al", "--ql-mode", "fld", "--aligned-mode", "fld", "--lambdas", "1,0.5,0.2,0.5",
    ])

    saved = json.loads((tmp_path / "train_config.json").read_text())
    log = pd.read_json(tmp_path / LOG_NAME, lines=True)
    assert code == EXIT_OK
    assert saved["plan"]["enable_ql"] and not saved["plan"]["enable_pl"]
    assert saved["plan"]["ql_mode"] == "fld"
    assert saved["plan"]["aligned_mode"] == "fld"
    assert saved["plan"]["weights"]["l2"] == 0.5
    assert log["l_ql"].iloc[0] > 0.0


def test_train_bad_lambdas(workspace, tmp_path):
    """Test that a malformed weight list is a usage error."""
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--lambdas", "1,2"])

    assert code == EXIT_USAGE


def test_train_missing_dataset(tmp_path):
    """Test that a directory without a manifest is a data error."""
    code = main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "out")])

    assert code == EXIT_DATA


# ============================================================================
# eval / info
# ============================================================================

def test_eval_report(workspace, tmp_path):
    """Test the keys of the written metrics report."""
    report = tmp_path / "metrics.json"

    code = main(["eval", "--ckpt", str(workspace / "teacher" / CHECKPOINT_NAME),
                 "--data", str(workspace / "data"), "--report", str(report)])

    data = json.loads(report.read_text())
    assert code == EXIT_OK
    assert set(data) == {"iou", "per_class_iou", "miou", "class_names"}
    assert len(data["per_class_iou"]) == 6
    assert 0.0 <= data["iou"] <= 1.0


def test_eval_report_is_byte_identical_across_runs(workspace, tmp_path):
    """Test that evaluating the same checkpoint twice writes the same report."""
    reports = [tmp_path / "first.json", tmp_path / "second.json"]

    for report in reports:
        assert main(["eval", "--ckpt", str(workspace / "teacher" / CHECKPOINT_NAME),
                     "--data", str(workspace / "data"), "--report", str(report)]) == EXIT_OK

    assert reports[0].read_bytes() == reports[1].read_bytes()


def test_eval_threshold_above_one(workspace, tmp_path):
    """Test that an impossible threshold gives zero occupancy IoU."""
    report = tmp_path / "metrics.json"

    code = main(["eval", "--ckpt", str(workspace / "teacher" / CHECKPOINT_NAME),
                 "--data", str(workspace / "data"), "--report", str(report), "--threshold", "1.1"])

    assert code == EXIT_OK
    assert json.loads(report.read_text())["iou"] == 0.0


def test_eval_corrupt_checkpoint(workspace, tmp_path):
    """Test that a checkpoint with a bad magic number is a data error."""
    ckpt = tmp_path / CHECKPOINT_NAME
    source = workspace / "teacher" / CHECKPOINT_NAME
    ckpt.write_bytes(b"NOPE" + source.read_bytes()[4:])
    (tmp_path / (CHECKPOINT_NAME + ".json")).write_text((workspace / "teacher" / (CHECKPOINT_NAME + ".json")).read_text())

    code = main(["eval", "--ckpt", str(ckpt), "--data", str(workspace / "data")])

    assert code == EXIT_DATA


def test_info(workspace, capsys):
    """Test that info prints the parameter count."""
    code = main(["info", "--ckpt", str(workspace / "teacher" / CHECKPOINT_NAME)])

    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "parameters:" in out


# ============================================================================
# gradcheck
# ============================================================================

def test_gradcheck_single_component(tmp_path):
    """Test a passing component and its JSON report."""
    report = tmp_path / "grad.json"

    code = main(["gradcheck", "--component", "chamfer", "--trials", "1", "--report", str(report)])

    data = json.loads(report.read_text())
    assert code == EXIT_OK
    assert data[0]["component"] == "chamfer"
    assert data[0]["passed"] is True


def test_gradcheck_unknown_component():
    """Test that an unknown component is a usage error."""
    assert main(["gradcheck", "--component", "nope"]) == EXIT_USAGE


def test_gradcheck_failure_exit_code():
    """Test that a failing check exits with the verification code."""
    failing = GradcheckReport("chamfer", threshold=1e-4, max_rel_error={"pred": 0.5}, trials=1)

    with patch("src.cli.gradcheck", return_value=failing):
        code = main(["gradcheck", "--component", "chamfer"])

    assert code == EXIT_VERIFY
