import numpy as np
import pytest
from numpy.testing import assert_allclose

from vxadapt.exceptions import VxError
from vxadapt.fileio import (
    format_csv,
    format_voxels,
    parse_voxels,
    read_csv,
    read_manifest,
    read_pgm,
    read_voxels,
    write_csv,
    write_manifest,
    write_pgm,
    write_voxels,
)
from vxadapt.testing import assert_error

# -----------------------------------------------------------------------------


def test_voxels(tmp_path, voxels):
    path = tmp_path / "grids" / "a.vox"
    write_voxels(path, voxels[0])

    assert path.read_text().startswith("voxel 16 16 16\n")
    assert np.array_equal(read_voxels(path), voxels[0])


def test_voxel_layout():
    grid = np.zeros((2, 2, 2))
    grid[0, 1, 0] = 1
    grid[1, 0, 1] = 0.5

    assert format_voxels(grid).splitlines() == [
        "voxel 2 2 2",
        "0.0 0.0",
        "1.0 0.0",
        "0.0 0.5",
        "0.0 0.0",
    ]


@pytest.mark.parametrize(
    "text",
    (
        "",
        "grid 2 2 2 0",
        "voxel 2 2 2 1 2",
        "voxel 2 2 x 0",
        "voxel 1 2 1 0 0",
    ),
)
def test_voxel_format_errors(text):
    with pytest.raises(VxError) as excinfo:
        parse_voxels(text)

    assert_error(excinfo, 1, [{"code": "invalid_format.file"}])


def test_read_missing(tmp_path):
    with pytest.raises(VxError) as excinfo:
        read_voxels(tmp_path / "missing.vox")

    assert_error(excinfo, 1, [{"code": "io.read"}])


# -----------------------------------------------------------------------------


def test_pgm(tmp_path):
    pixels = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = tmp_path / "a.pgm"
    write_pgm(path, pixels)

    assert path.read_text().splitlines() == [
        "P2",
        "2 2",
        "255",
        "0 128",
        "255 64",
    ]
    assert_allclose(read_pgm(path), [[0, 128 / 255], [1, 64 / 255]])


def test_pgm_comments(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_text("P2\n# made by hand\n2 1\n# levels\n4\n0 4\n")

    assert_allclose(read_pgm(path), [[0, 1]])


def test_pgm_errors(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_text("P5\n1 1\n255\n0\n")
    with pytest.raises(VxError) as excinfo:
        read_pgm(path)
    assert_error(excinfo, 1, [{"code": "invalid_format.file"}])

    path.write_text("P2\n2 2\n255\n0 1 2\n")
    with pytest.raises(VxError) as excinfo:
        read_pgm(path)
    assert_error(excinfo, 1, [{"code": "invalid_format.file"}])


# -----------------------------------------------------------------------------


def test_csv(tmp_path):
    path = tmp_path / "out.csv"
    write_csv(path, ("a", "b"), [{"a": 1, "b": None}, {"a": 2, "b": 0.5}])

    assert path.read_text() == "a,b\n1,\n2,0.5\n"
    assert read_csv(path) == [{"a": "1", "b": ""}, {"a": "2", "b": "0.5"}]


def test_format_csv_column_order():
    assert format_csv(("b", "a"), [{"a": 1, "b": 2}]) == "b,a\n2,1\n"


def test_manifest(tmp_path):
    path = tmp_path / "manifest.csv"
    rows = [
        {"item_id": 0, "kind": "voxel", "path": "v.vox", "split": "train"},
        {
            "item_id": 1,
            "kind": "real",
            "path": "r.pgm",
            "azimuth": 90.0,
            "pair_id": None,
            "split": "real",
        },
    ]
    write_manifest(path, rows)

    assert read_manifest(path) == [
        {
            "item_id": 0,
            "kind": "voxel",
            "path": "v.vox",
            "azimuth": None,
            "pair_id": None,
            "split": "train",
        },
        {
            "item_id": 1,
            "kind": "real",
            "path": "r.pgm",
            "azimuth": 90.0,
            "pair_id": None,
            "split": "real",
        },
    ]


def test_manifest_errors(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("item_id,kind,path\nx,photo,a.pgm\n")

    with pytest.raises(VxError) as excinfo:
        read_manifest(path)

    errors = assert_error(excinfo, 1)
    assert {error["code"] for error in errors} == {"invalid_format.manifest"}
    assert len(errors) == 2
