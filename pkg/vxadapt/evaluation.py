"""Voxel IoU, latent retrieval, exports and the experiments built on them."""

import itertools
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .dataset import REAL, SYNTH, stack_pixels
from .exceptions import VxError
from .fileio import write_csv, write_manifest, write_pgm, write_voxels
from .networks import decode2d, encode2d, generate3d
from .schemas import (
    COMPARISON_COLUMNS,
    SWEEP_COLUMNS,
    ComparisonRowSchema,
    IoURowSchema,
    RetrievalRowSchema,
    SweepRowSchema,
)
from .tensor import INFERENCE
from .training import run_schedule
from .utils import if_none

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

DEFAULT_THRESHOLD = 0.3
DEFAULT_SHIFTS = range(-2, 3)
DEFAULT_SCALES = (0.75, 1.0, 1.25)

#: Inference batches are split into chunks of this many items.
CHUNK_SIZE = 64

SWEEP_FILE = "sweep.csv"
COMPARISON_FILE = "comparison.csv"
MANIFEST_FILE = "manifest.csv"

iou_row_schema = IoURowSchema()
retrieval_row_schema = RetrievalRowSchema()
sweep_row_schema = SweepRowSchema()
comparison_row_schema = ComparisonRowSchema()

# -----------------------------------------------------------------------------


def _check_threshold(t):
    if not 0 < t < 1:
        raise VxError.data(
            "invalid_value.threshold", f"t must be in (0, 1), got {t}"
        )


def _masks(prediction, truth, t):
    _check_threshold(t)
    prediction = np.asarray(prediction, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if prediction.shape != truth.shape:
        raise VxError.data(
            "invalid_shape.resolution",
            f"prediction {prediction.shape} and truth {truth.shape} differ",
        )
    return prediction > t, truth > 0.5


def _iou(predicted, occupied):
    union = np.count_nonzero(predicted | occupied)
    if union == 0:
        return 1.0
    return np.count_nonzero(predicted & occupied) / union


def compute_iou(prediction, truth, t=DEFAULT_THRESHOLD):
    """Intersection over union of ``prediction > t`` and the truth set.

    Two empty sets have an IoU of 1.

    :raises VxError: If the grids differ in shape or `t` is outside
        ``(0, 1)``.
    """
    return _iou(*_masks(prediction, truth, t))


def shift_grid(mask, offsets):
    """Translate a grid by whole voxels; cells shifted in are empty."""
    shifted = np.zeros_like(mask)
    source = []
    target = []
    for size, offset in zip(mask.shape, offsets):
        if abs(offset) >= size:
            return shifted
        if offset >= 0:
            source.append(slice(0, size - offset))
            target.append(slice(offset, size))
        else:
            source.append(slice(-offset, size))
            target.append(slice(0, size + offset))
    shifted[tuple(target)] = mask[tuple(source)]
    return shifted


def scale_grid(mask, scale):
    """Scale a grid about its center with nearest-voxel resampling."""
    indices = []
    valid = []
    for size in mask.shape:
        center = (size - 1) / 2.0
        source = np.rint((np.arange(size) - center) / scale + center)
        source = source.astype(int)
        indices.append(np.clip(source, 0, size - 1))
        valid.append((source >= 0) & (source < size))

    scaled = mask[np.ix_(*indices)]
    inside = np.logical_and.reduce(np.meshgrid(*valid, indexing="ij"))
    return scaled & inside


def compute_iou_aligned(
    prediction,
    truth,
    t=DEFAULT_THRESHOLD,
    shifts=DEFAULT_SHIFTS,
    scales=DEFAULT_SCALES,
):
    """The best IoU over integer shifts and discrete scales of the
    prediction.

    The identity transform is always included, so the result is never
    below :py:func:`compute_iou`.
    """
    predicted, occupied = _masks(prediction, truth, t)
    best = _iou(predicted, occupied)

    for scale in scales:
        scaled = predicted if scale == 1 else scale_grid(predicted, scale)
        for offsets in itertools.product(shifts, repeat=predicted.ndim):
            if best == 1.0:
                return best
            best = max(best, _iou(shift_grid(scaled, offsets), occupied))
    return best


@dataclass(frozen=True)
class IoUResult:
    item_ids: tuple
    ious: tuple
    categories: tuple
    threshold: float
    aligned_ious: tuple = None

    @staticmethod
    def _mean(values):
        return float(np.mean(values)) if len(values) else None

    @property
    def mean(self):
        return self._mean(self.ious)

    @property
    def aligned_mean(self):
        if self.aligned_ious is None:
            return None
        return self._mean(self.aligned_ious)

    def category_means(self, aligned=False):
        values = self.aligned_ious if aligned else self.ious
        grouped = {}
        for category, value in zip(self.categories, values):
            grouped.setdefault(category, []).append(value)
        return {
            category: self._mean(grouped[category])
            for category in sorted(grouped, key=str)
        }

    def rows(self):
        aligned = self.aligned_ious or (None,) * len(self.ious)
        return iou_row_schema.dump(
            [
                {
                    "item_id": item_id,
                    "category": category,
                    "iou": iou,
                    "aligned_iou": aligned_iou,
                }
                for item_id, category, iou, aligned_iou in zip(
                    self.item_ids, self.categories, self.ious, aligned
                )
            ],
            many=True,
        )


def evaluate_iou(
    predictions,
    truths,
    categories=None,
    t=DEFAULT_THRESHOLD,
    aligned=False,
    item_ids=None,
):
    """Score predicted grids against their truths.

    :param categories: A category per item, for per-category means.
    :param bool aligned: Also compute the aligned IoU of every item.
    :rtype: IoUResult
    """
    _check_threshold(t)
    if len(predictions) != len(truths):
        raise VxError.data(
            "invalid_shape.count",
            f"{len(predictions)} predictions for {len(truths)} truths",
        )

    count = len(predictions)
    return IoUResult(
        item_ids=tuple(if_none(item_ids, range(count))),
        ious=tuple(
            compute_iou(p, y, t) for p, y in zip(predictions, truths)
        ),
        categories=tuple(categories or (None,) * count),
        threshold=t,
        aligned_ious=(
            tuple(
                compute_iou_aligned(p, y, t)
                for p, y in zip(predictions, truths)
            )
            if aligned
            else None
        ),
    )


# -----------------------------------------------------------------------------


def _chunked(fn, pixels):
    if len(pixels) == 0:
        return np.zeros((0,))
    return np.concatenate(
        [
            fn(pixels[start : start + CHUNK_SIZE])
            for start in range(0, len(pixels), CHUNK_SIZE)
        ]
    )


def encode_images(g2, pixels):
    """Latent vectors of a ``(batch, 1, H, W)`` array, in inference mode."""
    return _chunked(lambda chunk: encode2d(chunk, g2, INFERENCE).data, pixels)


def reconstruct_images(g2, pixels):
    return _chunked(
        lambda chunk: decode2d(encode2d(chunk, g2, INFERENCE), g2).data,
        pixels,
    )


def predict_voxels(g2, g3, pixels):
    """Voxel grids generated from images through the 2D encoder."""
    return _chunked(
        lambda chunk: generate3d(encode2d(chunk, g2, INFERENCE), g3).data,
        pixels,
    )


def evaluate_samples(
    state, samples, dataset, t=DEFAULT_THRESHOLD, aligned=False
):
    """Reconstruct voxels from images of known shapes and score them."""
    missing = [s.item_id for s in samples if s.shape_id is None]
    if missing:
        raise VxError.data(
            "invalid_dataset.missing_pair",
            f"items {missing[:5]} have no voxel grid to score against",
        )

    predictions = (
        predict_voxels(
            state.params["G2"], state.params["G3"], stack_pixels(samples)
        )
        if samples
        else []
    )
    return evaluate_iou(
        predictions,
        [dataset.grids[s.shape_id] for s in samples],
        [dataset.category(s.shape_id) for s in samples],
        t,
        aligned,
        item_ids=[s.item_id for s in samples],
    )


# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    item_ids: tuple
    shape_ids: tuple
    distances: tuple

    def rows(self):
        return retrieval_row_schema.dump(
            [
                {
                    "query_id": self.query_id,
                    "rank": rank,
                    "item_id": item_id,
                    "shape_id": shape_id,
                    "distance": distance,
                }
                for rank, (item_id, shape_id, distance) in enumerate(
                    zip(self.item_ids, self.shape_ids, self.distances), 1
                )
            ],
            many=True,
        )


def retrieve_nearest(query, pool, params, k=5):
    """Rank pool images by latent L2 distance to the query.

    The query is encoded in the same batch as the pool. Ties go to the lower
    item id.

    :param ImageSample query: The query image.
    :param list pool: Candidate :py:class:`~vxadapt.rendering.ImageSample`
        items.
    :param ParameterSet params: Weights of G2.
    :param int k: How many neighbors to return; at most the pool size.
    :rtype: RetrievalResult
    """
    if not pool:
        raise VxError.data("invalid_dataset.empty_pool", "the pool is empty")
    if k < 1:
        raise VxError.data("invalid_value.k", f"k must be >= 1, got {k}")

    latents = encode_images(params, stack_pixels([query] + list(pool)))
    distances = np.sqrt(np.square(latents[1:] - latents[0]).sum(axis=1))
    item_ids = _item_ids(pool)

    order = np.lexsort((item_ids, distances))[:k]
    return RetrievalResult(
        query_id=query.item_id,
        item_ids=tuple(int(item_ids[i]) for i in order),
        shape_ids=tuple(pool[i].shape_id for i in order),
        distances=tuple(float(distances[i]) for i in order),
    )


def _item_ids(pool):
    return np.array(
        [
            sample.item_id if sample.item_id is not None else index
            for index, sample in enumerate(pool)
        ]
    )


def is_self_hit(query, sample):
    """Whether a retrieved sample counts as the query itself.

    Views of a symmetric shape can render to the same pixels, so any
    pixel-identical image is a hit.
    """
    return sample.item_id == query.item_id or np.array_equal(
        sample.pixels, query.pixels
    )


def self_retrieval_rate(pool, params):
    """Fraction of pool images whose nearest pool neighbor is a self-hit.

    The pool is encoded once; ties go to the lower item id as in
    :py:func:`retrieve_nearest`.
    """
    if not pool:
        raise VxError.data("invalid_dataset.empty_pool", "the pool is empty")

    latents = encode_images(params, stack_pixels(pool))
    distances = np.sqrt(
        np.square(latents[:, np.newaxis] - latents[np.newaxis]).sum(axis=2)
    )
    item_ids = _item_ids(pool)

    hits = 0
    for index, row in enumerate(distances):
        nearest = np.lexsort((item_ids, row))[0]
        hits += is_self_hit(pool[index], pool[nearest])

    rate = hits / len(pool)
    logger.info("self-retrieval: %d of %d (%.3f)", hits, len(pool), rate)
    return rate


# -----------------------------------------------------------------------------


def tile_images(rows, gap=1):
    """Lay out rows of equally sized images as one panel."""
    height, width = rows[0][0].shape
    columns = max(len(row) for row in rows)
    panel = np.zeros(
        (
            len(rows) * (height + gap) - gap,
            columns * (width + gap) - gap,
        )
    )
    for r, row in enumerate(rows):
        for c, image in enumerate(row):
            top = r * (height + gap)
            left = c * (width + gap)
            panel[top : top + height, left : left + width] = image
    return panel


@dataclass(frozen=True)
class SweepRow:
    phi2: float
    real_l1: float
    synth_l1: float
    confusion: float


def _domain_outputs(g2, samples):
    pixels = stack_pixels(samples)
    return pixels, reconstruct_images(g2, pixels)


def phi2_sweep(values, config, dataset, out_dir=None, panel_size=8):
    """Train stage 1 once per phi2 value and measure domain confusion.

    Every run starts from the same seed. The confusion statistic is the mean
    absolute difference between the average G2 output of the real-style and
    the synthesized test images.

    :return: One :py:class:`SweepRow` per value, in order.
    """
    values = list(values)
    if not values:
        raise VxError.data("invalid_value.sweep", "no phi2 values given")

    real_test = dataset.real_test
    synth_test = dataset.synth_test
    if not real_test or not synth_test:
        raise VxError.data(
            "invalid_dataset.empty_pool", "the sweep needs test images"
        )

    rows = []
    for phi2 in values:
        run_config = replace(
            config, phi2=phi2, steps_stage2=0, steps_joint=0
        )
        state = run_schedule(run_config, dataset)
        g2 = state.params["G2"]

        real, real_out = _domain_outputs(g2, real_test)
        synth, synth_out = _domain_outputs(g2, synth_test)
        row = SweepRow(
            phi2=float(phi2),
            real_l1=float(np.abs(real_out - real).mean()),
            synth_l1=float(np.abs(synth_out - synth).mean()),
            confusion=float(
                np.abs(real_out.mean(axis=0) - synth_out.mean(axis=0)).mean()
            ),
        )
        rows.append(row)
        logger.info("phi2 sweep: %s", row)

        if out_dir is not None:
            count = min(panel_size, len(real_test), len(synth_test))
            panel = tile_images(
                [
                    list(real[:count, 0]),
                    list(real_out[:count, 0]),
                    list(synth[:count, 0]),
                    list(synth_out[:count, 0]),
                ]
            )
            write_pgm(os.path.join(out_dir, f"phi2_{phi2:g}.pgm"), panel)

    if out_dir is not None:
        write_csv(
            os.path.join(out_dir, SWEEP_FILE),
            SWEEP_COLUMNS,
            sweep_row_schema.dump(rows, many=True),
        )
    return rows


# -----------------------------------------------------------------------------


def export_outputs(state, items, out_dir, grids=None):
    """Write input images, reconstructions and voxel predictions.

    Files are named ``item{id}_{kind}.{ext}``. Truth grids are written for
    items whose shape is in `grids`.

    :return: The manifest rows, also written to ``manifest.csv``.
    """
    g2 = state.params["G2"]
    g3 = state.params["G3"]
    items = list(items)

    if items:
        pixels = stack_pixels(items)
        outputs = reconstruct_images(g2, pixels)
        voxels = predict_voxels(g2, g3, pixels)

    rows = []

    def add(sample, kind, filename, writer, value):
        writer(os.path.join(out_dir, filename), value)
        rows.append(
            {
                "item_id": sample.item_id,
                "kind": kind,
                "path": filename,
                "azimuth": sample.azimuth,
                "pair_id": sample.shape_id,
            }
        )

    for index, sample in enumerate(items):
        base = f"item{sample.item_id}"
        add(sample, "input", f"{base}_input.pgm", write_pgm, sample.pixels)
        add(
            sample,
            "output",
            f"{base}_output.pgm",
            write_pgm,
            outputs[index, 0],
        )
        add(
            sample,
            "prediction",
            f"{base}_prediction.vox",
            write_voxels,
            voxels[index],
        )
        if grids is not None and sample.shape_id in grids:
            add(
                sample,
                "truth",
                f"{base}_truth.vox",
                write_voxels,
                grids[sample.shape_id],
            )

    write_manifest(os.path.join(out_dir, MANIFEST_FILE), rows)
    logger.info("exported %d items to %s", len(items), out_dir)
    return rows


# -----------------------------------------------------------------------------


def compare_adaptation(
    config, dataset, t=DEFAULT_THRESHOLD, out_dir=None
):
    """Train with and without domain adaptation and compare test IoU.

    Both pipelines start from the same seed. The baseline trains on
    synthesized renders only with phi2 forced to 0. Each is scored on
    real-style and synthesized images of the held-out shapes.

    :return: Comparison rows of pipeline, domain, mean IoU and mean aligned
        IoU.
    """
    rows = []
    for pipeline, adaptation in (("adapted", True), ("baseline", False)):
        state = run_schedule(replace(config, adaptation=adaptation), dataset)
        for domain, samples in (
            (REAL, dataset.real_test),
            (SYNTH, dataset.synth_test),
        ):
            result = evaluate_samples(state, samples, dataset, t, True)
            rows.append(
                {
                    "pipeline": pipeline,
                    "domain": domain,
                    "iou": result.mean,
                    "aligned_iou": result.aligned_mean,
                }
            )
            logger.info("comparison: %s", rows[-1])

    rows = comparison_row_schema.dump(rows, many=True)
    if out_dir is not None:
        write_csv(
            os.path.join(out_dir, COMPARISON_FILE),
            COMPARISON_COLUMNS,
            rows,
        )
    return rows
