import csv
import io
import json
import os

import numpy as np
import pytest

from vxadapt.cli import cli_main
from vxadapt.dataset import load_dataset_files
from vxadapt.fileio import write_voxels
from vxadapt.training import CHECKPOINT_FILE, LOG_FILE, load_checkpoint

# -----------------------------------------------------------------------------

TRAIN_ARGS = (
    "--set",
    "batch_size=2",
    "--set",
    "steps_stage1=1",
    "--set",
    "steps_stage2=1",
    "--set",
    "steps_joint=1",
    "--set",
    "prefetch=0",
)


def run(capsys, *args):
    exit_code = cli_main([str(arg) for arg in args])
    out, err = capsys.readouterr()
    return exit_code, out, err


def csv_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def error_codes(err):
    return [error["code"] for error in json.loads(err)["errors"]]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    args = ["gen-data", "--shapes", 6, "--views", 4, "--out", path]
    assert cli_main([str(arg) for arg in args]) == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    path = tmp_path_factory.mktemp("run")
    args = ["train", "--data", data_dir, "--out", path, *TRAIN_ARGS]
    assert cli_main([str(arg) for arg in args]) == 0
    return path


@pytest.fixture
def vox_dirs(tmp_path):
    grid = np.zeros((4, 4, 4))
    grid[1:3, 1:3, 1:3] = 1

    pred = tmp_path / "pred"
    truth = tmp_path / "truth"
    write_voxels(pred / "item1_prediction.vox", grid * 0.9)
    write_voxels(pred / "item2_prediction.vox", np.zeros_like(grid))
    write_voxels(truth / "item1_truth.vox", grid)
    write_voxels(truth / "item2_truth.vox", grid)
    return pred, truth


# -----------------------------------------------------------------------------


def test_gen_data(data_dir):
    dataset = load_dataset_files(data_dir)

    assert len(dataset.grids) == 6
    assert len(dataset.synth) == 24
    assert os.path.exists(data_dir / "manifest.csv")


def test_gen_data_invalid(capsys, tmp_path):
    exit_code, _, err = run(
        capsys, "gen-data", "--split", "1.5", "--out", tmp_path
    )

    assert exit_code == 2
    assert error_codes(err) == ["invalid_config.value"]


def test_train(run_dir):
    state = load_checkpoint(run_dir / CHECKPOINT_FILE)

    assert state.step == 3
    assert state.phase == 3
    assert os.path.exists(run_dir / LOG_FILE)


def test_train_unknown_key(capsys, tmp_path):
    exit_code, _, err = run(
        capsys, "train", "--out", tmp_path, "--set", "nope=1"
    )

    assert exit_code == 2
    body = json.loads(err)
    assert body["errors"][0]["code"] == "invalid_config.unknown_key"
    assert body["errors"][0]["source"] == {"key": "nope"}


def test_train_missing_config(capsys, tmp_path):
    exit_code, _, err = run(
        capsys,
        "train",
        "--config",
        tmp_path / "missing.cfg",
        "--out",
        tmp_path,
    )

    assert exit_code == 2
    assert error_codes(err) == ["invalid_config.missing"]


def test_train_resume(capsys, data_dir, run_dir, tmp_path):
    exit_code, out, _ = run(
        capsys,
        "train",
        "--data",
        data_dir,
        "--out",
        tmp_path,
        "--resume",
        run_dir / CHECKPOINT_FILE,
        *TRAIN_ARGS[:-4],
        "--set",
        "steps_joint=2",
    )

    assert exit_code == 0
    assert "step 4" in out
    assert load_checkpoint(tmp_path / CHECKPOINT_FILE).step == 4


# -----------------------------------------------------------------------------


def test_eval_files(capsys, vox_dirs):
    pred, truth = vox_dirs

    exit_code, out, _ = run(
        capsys, "eval", "--pred", pred, "--truth", truth, "--aligned"
    )

    assert exit_code == 0
    rows = csv_rows(out)
    assert [row["item_id"] for row in rows] == ["1", "2", "mean"]
    assert float(rows[0]["iou"]) == 1
    assert float(rows[1]["iou"]) == 0
    assert float(rows[2]["iou"]) == 0.5
    assert float(rows[2]["aligned_iou"]) == 0.5


def test_eval_threshold(capsys, vox_dirs):
    pred, truth = vox_dirs

    _, out, _ = run(
        capsys, "eval", "--pred", pred, "--truth", truth, "--t", "0.95"
    )

    assert float(csv_rows(out)[0]["iou"]) == 0
    assert csv_rows(out)[0]["aligned_iou"] == ""


def test_eval_missing_pair(capsys, vox_dirs):
    pred, truth = vox_dirs
    os.remove(truth / "item2_truth.vox")

    exit_code, _, err = run(capsys, "eval", "--pred", pred, "--truth", truth)

    assert exit_code == 1
    assert error_codes(err) == ["invalid_dataset.missing_pair"]


def test_eval_bad_threshold(capsys, vox_dirs):
    pred, truth = vox_dirs

    exit_code, _, err = run(
        capsys, "eval", "--pred", pred, "--truth", truth, "--t", "1"
    )

    assert exit_code == 1
    assert error_codes(err) == ["invalid_value.threshold"]


def test_eval_usage(capsys):
    exit_code, _, err = run(capsys, "eval")

    assert exit_code == 2
    assert "--checkpoint" in err


def test_eval_checkpoint(capsys, data_dir, run_dir):
    exit_code, out, _ = run(
        capsys,
        "eval",
        "--checkpoint",
        run_dir / CHECKPOINT_FILE,
        "--data",
        data_dir,
    )

    assert exit_code == 0
    rows = csv_rows(out)
    assert rows[-1]["item_id"] == "mean"
    assert len([row for row in rows if row["item_id"] != "mean"]) == 8


# -----------------------------------------------------------------------------


def test_retrieve(capsys, data_dir, run_dir):
    exit_code, out, _ = run(
        capsys,
        "retrieve",
        "--checkpoint",
        run_dir / CHECKPOINT_FILE,
        "--data",
        data_dir,
        "--shape",
        load_dataset_files(data_dir).test_ids[0],
        "--k",
        3,
    )

    assert exit_code == 0
    assert [row["rank"] for row in csv_rows(out)] == ["1", "2", "3"]


def test_retrieve_usage(capsys, run_dir):
    exit_code, _, _ = run(
        capsys, "retrieve", "--checkpoint", run_dir / CHECKPOINT_FILE
    )

    assert exit_code == 2


def test_retrieve_unknown_item(capsys, data_dir, run_dir):
    exit_code, _, err = run(
        capsys,
        "retrieve",
        "--checkpoint",
        run_dir / CHECKPOINT_FILE,
        "--data",
        data_dir,
        "--query",
        99999,
    )

    assert exit_code == 2
    assert error_codes(err) == ["invalid_value.query"]


def test_export(capsys, data_dir, run_dir, tmp_path):
    exit_code, out, _ = run(
        capsys,
        "export",
        "--checkpoint",
        run_dir / CHECKPOINT_FILE,
        "--data",
        data_dir,
        "--out",
        tmp_path,
        "--limit",
        1,
    )

    assert exit_code == 0
    assert "exported 8 files" in out
    assert os.path.exists(tmp_path / "manifest.csv")


# -----------------------------------------------------------------------------


def test_sweep_bad_values(capsys):
    exit_code, _, err = run(capsys, "sweep-phi2", "--values", "0,x")

    assert exit_code == 2
    assert "--values" in err


def test_sweep(capsys, data_dir, tmp_path):
    exit_code, out, _ = run(
        capsys,
        "sweep-phi2",
        "--data",
        data_dir,
        "--values",
        "0,0.7",
        "--out",
        tmp_path,
        *TRAIN_ARGS,
    )

    assert exit_code == 0
    assert [row["phi2"] for row in csv_rows(out)] == ["0.0", "0.7"]


def test_sweep_default_values(capsys, data_dir):
    exit_code, out, _ = run(
        capsys, "sweep-phi2", "--data", data_dir, *TRAIN_ARGS
    )

    assert exit_code == 0
    assert [row["phi2"] for row in csv_rows(out)] == [
        "0.3",
        "0.5",
        "0.7",
        "0.9",
    ]


def test_compare(capsys, data_dir):
    exit_code, out, _ = run(
        capsys, "compare", "--data", data_dir, *TRAIN_ARGS
    )

    assert exit_code == 0
    assert len(csv_rows(out)) == 4
