import dataclasses
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vxadapt.evaluation import (
    COMPARISON_FILE,
    MANIFEST_FILE,
    SWEEP_FILE,
    compare_adaptation,
    compute_iou,
    compute_iou_aligned,
    evaluate_iou,
    evaluate_samples,
    export_outputs,
    is_self_hit,
    phi2_sweep,
    retrieve_nearest,
    scale_grid,
    self_retrieval_rate,
    shift_grid,
    tile_images,
)
from vxadapt.exceptions import VxError
from vxadapt.fileio import read_csv, read_manifest, read_pgm, read_voxels
from vxadapt.rendering import REAL, SYNTH
from vxadapt.shapes import CATEGORIES
from vxadapt.testing import assert_error
from vxadapt.training import init_state

# -----------------------------------------------------------------------------


@pytest.fixture
def state(train_config):
    return init_state(train_config)


@pytest.fixture
def box():
    grid = np.zeros((8, 8, 8))
    grid[2:5, 2:5, 2:5] = 1
    return grid


@pytest.fixture
def short_config(train_config):
    return dataclasses.replace(
        train_config, steps_stage1=1, steps_stage2=1, steps_joint=1
    )


# -----------------------------------------------------------------------------


def test_iou():
    prediction = np.array([0.9, 0.8, 0.1, 0.0])
    truth = np.array([0.0, 1.0, 1.0, 0.0])

    assert compute_iou(prediction, truth) == pytest.approx(1 / 3)


def test_iou_empty_sets():
    assert compute_iou(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1


def test_iou_threshold_is_strict():
    prediction = np.array([0.3, 0.31])
    truth = np.array([1.0, 1.0])

    assert compute_iou(prediction, truth) == 0.5
    assert compute_iou(prediction, truth, t=0.2) == 1


def test_iou_matches_enumeration(rng):
    for _ in range(1000):
        prediction = rng.uniform(size=(4, 4, 4))
        truth = (rng.uniform(size=(4, 4, 4)) > 0.5).astype(float)

        both = either = 0
        for index in np.ndindex(4, 4, 4):
            predicted = prediction[index] > 0.3
            occupied = truth[index] > 0.5
            both += predicted and occupied
            either += predicted or occupied

        expected = both / either if either else 1.0
        assert compute_iou(prediction, truth) == expected


def test_iou_disjoint(box):
    assert compute_iou(box, 1 - box) == 0


def test_iou_identical(box):
    assert compute_iou(box, box) == 1


def test_iou_resolution_error(box):
    with pytest.raises(VxError) as excinfo:
        compute_iou(box, box[:4])

    assert_error(excinfo, 1, [{"code": "invalid_shape.resolution"}])


@pytest.mark.parametrize("t", (0, 1, -0.5, 2))
def test_iou_threshold_error(t, box):
    with pytest.raises(VxError) as excinfo:
        compute_iou(box, box, t)

    assert_error(excinfo, 1, [{"code": "invalid_value.threshold"}])


# -----------------------------------------------------------------------------


def test_shift_grid():
    mask = np.array([[True, False, False], [False, False, False]])

    assert shift_grid(mask, (1, 2)).tolist() == [
        [False, False, False],
        [False, False, True],
    ]
    assert not shift_grid(mask, (-1, 0)).any()
    assert not shift_grid(mask, (0, 3)).any()


def test_scale_grid_identity(box):
    mask = box > 0.5

    assert np.array_equal(scale_grid(mask, 1.0), mask)


def test_scale_grid_grows(box):
    mask = box > 0.5

    assert scale_grid(mask, 1.25).sum() >= mask.sum()
    assert scale_grid(mask, 0.75).sum() <= mask.sum()


@pytest.mark.parametrize("scale", (0.75, 1.25))
def test_scale_grid_keeps_shape(scale):
    mask = np.ones((16, 16, 16), dtype=bool)

    assert scale_grid(mask, scale).shape == (16, 16, 16)


def test_scale_grid_full_grid():
    mask = np.ones((16, 16, 16), dtype=bool)

    grown = scale_grid(mask, 1.25)
    assert grown[0].sum() == 256
    assert grown.all()

    shrunk = scale_grid(mask, 0.75)
    assert shrunk.sum() == 12**3
    assert shrunk[2:14, 2:14, 2:14].all()
    assert not shrunk[0].any()


def test_scale_grid_keeps_edge_planes():
    mask = np.zeros((16, 16, 16), dtype=bool)
    mask[0:4, 6:10, 6:10] = True

    assert scale_grid(mask, 1.25)[0].any()


def test_aligned_iou_large_box():
    truth = np.zeros((16, 16, 16))
    truth[4:12, 4:12, 4:12] = 1
    prediction = np.roll(truth, 1, axis=0)

    assert compute_iou(prediction, truth) == pytest.approx(7 / 9)
    assert compute_iou_aligned(prediction, truth) == 1


def test_aligned_iou_recovers_shift(box):
    shifted = np.roll(box, 1, axis=1)

    assert compute_iou(shifted, box) < 1
    assert compute_iou_aligned(shifted, box) == 1


def test_aligned_iou_is_at_least_plain(rng):
    for _ in range(5):
        prediction = rng.uniform(size=(6, 6, 6))
        truth = (rng.uniform(size=(6, 6, 6)) > 0.6).astype(float)

        assert compute_iou_aligned(prediction, truth) >= compute_iou(
            prediction, truth
        )


# -----------------------------------------------------------------------------


def test_evaluate_iou(box):
    empty = np.zeros_like(box)
    result = evaluate_iou(
        [box, empty, box],
        [box, box, box],
        ["chair", "chair", "table"],
        aligned=True,
        item_ids=[4, 5, 6],
    )

    assert result.ious == (1.0, 0.0, 1.0)
    assert result.mean == pytest.approx(2 / 3)
    assert result.category_means() == {"chair": 0.5, "table": 1.0}
    assert result.aligned_ious == (1.0, 0.0, 1.0)
    assert result.rows()[1] == {
        "item_id": 5,
        "category": "chair",
        "iou": 0.0,
        "aligned_iou": 0.0,
    }


def test_evaluate_iou_defaults(box):
    result = evaluate_iou([box], [box])

    assert result.item_ids == (0,)
    assert result.aligned_ious is None
    assert result.aligned_mean is None
    assert result.rows()[0]["aligned_iou"] is None


def test_evaluate_iou_empty():
    result = evaluate_iou([], [])

    assert result.mean is None
    assert result.rows() == []


def test_evaluate_iou_count_error(box):
    with pytest.raises(VxError) as excinfo:
        evaluate_iou([box], [box, box])

    assert_error(excinfo, 1, [{"code": "invalid_shape.count"}])


def test_evaluate_samples(state, dataset):
    result = evaluate_samples(state, dataset.synth_test, dataset)

    assert len(result.ious) == len(dataset.synth_test)
    assert all(0 <= iou <= 1 for iou in result.ious)
    assert set(result.category_means()) <= set(CATEGORIES)


def test_evaluate_samples_missing_pair(state, dataset):
    unpaired = [s for s in dataset.real if s.shape_id is None][:2]

    with pytest.raises(VxError) as excinfo:
        evaluate_samples(state, unpaired, dataset)

    assert_error(excinfo, 1, [{"code": "invalid_dataset.missing_pair"}])


# -----------------------------------------------------------------------------


def test_retrieval(state, dataset):
    pool = dataset.synth_pool[:6]
    result = retrieve_nearest(pool[2], pool, state.params["G2"], k=3)

    items = {s.item_id: s for s in pool}
    assert result.query_id == pool[2].item_id
    assert is_self_hit(pool[2], items[result.item_ids[0]])
    assert result.distances[0] == pytest.approx(0, abs=1e-9)
    assert list(result.distances) == sorted(result.distances)
    assert len(result.rows()) == 3
    assert [row["rank"] for row in result.rows()] == [1, 2, 3]


def test_retrieval_k_is_capped(state, dataset):
    pool = dataset.synth_pool[:3]
    result = retrieve_nearest(
        dataset.stylized_view(dataset.test_ids[0], 0),
        pool,
        state.params["G2"],
        k=10,
    )

    assert len(result.item_ids) == 3
    assert set(result.shape_ids) == {s.shape_id for s in pool}


def test_retrieval_errors(state, dataset):
    query = dataset.synth_pool[0]

    with pytest.raises(VxError) as excinfo:
        retrieve_nearest(query, [], state.params["G2"])
    assert_error(excinfo, 1, [{"code": "invalid_dataset.empty_pool"}])

    with pytest.raises(VxError) as excinfo:
        retrieve_nearest(query, [query], state.params["G2"], k=0)
    assert_error(excinfo, 1, [{"code": "invalid_value.k"}])

    with pytest.raises(VxError) as excinfo:
        self_retrieval_rate([], state.params["G2"])
    assert_error(excinfo, 1, [{"code": "invalid_dataset.empty_pool"}])


def test_self_hit_counts_identical_pixels(state, dataset):
    query = dataset.synth_pool[0]
    copy = dataclasses.replace(query, item_id=-1)
    other = next(
        s for s in dataset.synth_pool if s.shape_id != query.shape_id
    )

    assert is_self_hit(query, query)
    assert is_self_hit(query, copy)
    assert not is_self_hit(query, other)

    result = retrieve_nearest(query, [other, copy], state.params["G2"], k=1)
    assert result.item_ids == (-1,)


def test_self_retrieval(state, dataset):
    assert self_retrieval_rate(dataset.synth_pool, state.params["G2"]) == 1


# -----------------------------------------------------------------------------


def test_tile_images():
    panel = tile_images(
        [[np.ones((2, 3)), np.ones((2, 3))], [np.full((2, 3), 0.5)]]
    )

    assert panel.shape == (5, 7)
    assert_allclose(panel[:2, :3], 1)
    assert_allclose(panel[:, 3], 0)
    assert_allclose(panel[3:, :3], 0.5)
    assert_allclose(panel[3:, 4:], 0)


def test_export_outputs(state, dataset, tmp_path):
    items = dataset.synth_test[:2]

    rows = export_outputs(state, items, tmp_path, dataset.grids)

    assert len(rows) == 8
    assert [row["kind"] for row in rows[:4]] == [
        "input",
        "output",
        "prediction",
        "truth",
    ]
    assert read_manifest(tmp_path / MANIFEST_FILE)[0]["item_id"] == (
        items[0].item_id
    )

    base = tmp_path / f"item{items[0].item_id}"
    assert read_pgm(f"{base}_output.pgm").shape == (16, 16)
    assert read_voxels(f"{base}_prediction.vox").shape == (16, 16, 16)
    assert np.array_equal(
        read_voxels(f"{base}_truth.vox"), dataset.grids[items[0].shape_id]
    )


def test_export_outputs_without_truth(state, dataset, tmp_path):
    rows = export_outputs(state, dataset.real_pool[:1], tmp_path)

    assert [row["kind"] for row in rows] == ["input", "output", "prediction"]


def test_export_nothing(state, tmp_path):
    assert export_outputs(state, [], tmp_path) == []
    assert read_csv(tmp_path / MANIFEST_FILE) == []


# -----------------------------------------------------------------------------


def test_phi2_sweep(train_config, dataset, tmp_path):
    config = dataclasses.replace(train_config, steps_stage1=1)

    rows = phi2_sweep([0.0, 0.7], config, dataset, tmp_path, panel_size=2)

    assert [row.phi2 for row in rows] == [0.0, 0.7]
    assert all(row.confusion >= 0 for row in rows)
    assert len(read_csv(tmp_path / SWEEP_FILE)) == 2
    assert read_pgm(os.path.join(tmp_path, "phi2_0.7.pgm")).shape == (
        4 * 17 - 1,
        2 * 17 - 1,
    )


def test_phi2_sweep_is_reproducible(train_config, dataset):
    config = dataclasses.replace(train_config, steps_stage1=1)

    first = phi2_sweep([0.5], config, dataset)
    second = phi2_sweep([0.5], config, dataset)

    assert first == second


def test_phi2_sweep_needs_values(train_config, dataset):
    with pytest.raises(VxError) as excinfo:
        phi2_sweep([], train_config, dataset)

    assert_error(excinfo, 1, [{"code": "invalid_value.sweep"}])


def test_compare_adaptation(short_config, dataset, tmp_path):
    rows = compare_adaptation(short_config, dataset, out_dir=tmp_path)

    assert [(row["pipeline"], row["domain"]) for row in rows] == [
        ("adapted", REAL),
        ("adapted", SYNTH),
        ("baseline", REAL),
        ("baseline", SYNTH),
    ]
    assert all(row["aligned_iou"] >= row["iou"] for row in rows)
    assert len(read_csv(tmp_path / COMPARISON_FILE)) == 4
