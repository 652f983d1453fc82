"""Synthetic datasets: shapes, their paired renders and unpaired sketches.

Shapes are split three ways. Test shapes are held out. The remaining
training shapes are divided into a synthesized pool, whose renders are
paired with voxels, and a disjoint real-style pool, whose sketches are never
joined to any voxel grid during training.
"""

import json
import logging
import os
import queue
import threading
from dataclasses import dataclass

import numpy as np
from marshmallow import Schema, ValidationError, fields, post_load, validate

from .exceptions import DATA_ERROR, VxError
from .fields import DelimitedList
from .fileio import (
    read_manifest,
    read_pgm,
    read_voxels,
    write_manifest,
    write_pgm,
    write_voxels,
)
from .rendering import REAL, SYNTH, ImageSample, render_view, stylize
from .shapes import (
    CATEGORIES,
    MIN_RESOLUTION,
    generate_shape,
    random_recipe,
)

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

TRAIN = "train"
REAL_POOL = "real"
TEST = "test"

DATASET_FILE = "dataset.json"
MANIFEST_FILE = "manifest.csv"

# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    shapes: int = 40
    views: int = 24
    split: float = 0.7
    real_fraction: float = 0.5
    resolution: int = 16
    image_size: int = 16
    categories: tuple = CATEGORIES
    seed: int = 0


class DatasetConfigSchema(Schema):
    shapes = fields.Integer(required=True, validate=validate.Range(min=2))
    views = fields.Integer(required=True, validate=validate.Range(min=1))
    split = fields.Float(
        required=True,
        validate=validate.Range(min=0, max=1, min_inclusive=False),
    )
    real_fraction = fields.Float(
        required=True, validate=validate.Range(min=0, max=1)
    )
    resolution = fields.Integer(
        required=True, validate=validate.Range(min=MIN_RESOLUTION)
    )
    image_size = fields.Integer(required=True, validate=validate.Range(min=4))
    categories = DelimitedList(
        fields.String(validate=validate.OneOf(CATEGORIES)), required=True
    )
    seed = fields.Integer(required=True)

    @post_load
    def make_config(self, data, **kwargs):
        return DatasetConfig(**data)


dataset_config_schema = DatasetConfigSchema()


@dataclass(frozen=True)
class Batch:
    """One training batch.

    `w` holds real-style images drawn independently of the paired
    synthesized renders `w_v` and their voxel grids `v_w`.
    """

    step: int
    w: np.ndarray
    w_v: np.ndarray
    v_w: np.ndarray
    synth_ids: tuple
    real_ids: tuple


def item_seed(seed, shape_id, view):
    """Derive an independent stylization seed for one render."""
    sequence = np.random.SeedSequence([seed, shape_id, view])
    return int(sequence.generate_state(1)[0])


def view_azimuth(view, views):
    return 360.0 * view / views


def stack_pixels(samples):
    """Stack image samples into a ``(batch, 1, H, W)`` array."""
    return np.stack([sample.pixels for sample in samples])[:, np.newaxis]


# -----------------------------------------------------------------------------


class Dataset:
    """Voxel grids, synthesized renders and real-style sketches.

    :param DatasetConfig config: How the dataset was generated.
    :param dict recipes: Shape id to :py:class:`~vxadapt.shapes.ShapeRecipe`.
    :param dict grids: Shape id to voxel grid.
    :param dict splits: Shape id to ``"train"``, ``"real"`` or ``"test"``.
    :param list synth: Synthesized renders of every shape.
    :param list real: Sketches of real-pool and test shapes. Only test
        sketches keep their shape id.
    """

    def __init__(self, config, recipes, grids, splits, synth, real):
        self.config = config
        self.recipes = recipes
        self.grids = grids
        self.splits = splits
        self.synth = synth
        self.real = real

        self.train_ids = self._ids(TRAIN)
        self.real_ids = self._ids(REAL_POOL)
        self.test_ids = self._ids(TEST)

        train = set(self.train_ids)
        self.synth_pool = [s for s in synth if s.shape_id in train]
        self.real_pool = [
            s for s in real if s.shape_id is None and s.domain == REAL
        ]

        self._synth_pixels = (
            stack_pixels(self.synth_pool) if self.synth_pool else None
        )
        self._synth_voxels = (
            np.stack([grids[s.shape_id] for s in self.synth_pool])
            if self.synth_pool
            else None
        )
        self._real_pixels = (
            stack_pixels(self.real_pool) if self.real_pool else None
        )

    def _ids(self, split):
        return tuple(
            sorted(
                shape_id
                for shape_id, value in self.splits.items()
                if value == split
            )
        )

    def category(self, shape_id):
        return self.recipes[shape_id].category

    def synth_items(self, shape_ids):
        wanted = set(shape_ids)
        return [s for s in self.synth if s.shape_id in wanted]

    @property
    def real_test(self):
        """Sketches of held-out shapes, linked to their shape for scoring."""
        test = set(self.test_ids)
        return [s for s in self.real if s.shape_id in test]

    @property
    def synth_test(self):
        return self.synth_items(self.test_ids)

    def stylized_view(self, shape_id, view):
        """Render a real-style query of any shape, for evaluation only."""
        render = render_view(
            self.grids[shape_id],
            view_azimuth(view, self.config.views),
            self.config.image_size,
        )
        sample = stylize(
            render, REAL, item_seed(self.config.seed, shape_id, view)
        )
        return ImageSample(
            sample.pixels,
            REAL,
            sample.azimuth,
            shape_id=shape_id,
            view=view,
        )

    # -------------------------------------------------------------------------

    def _check_unpaired(self, indices):
        for index in indices:
            sample = self.real_pool[index]
            if sample.shape_id is not None or sample.domain != REAL:
                raise VxError.data(
                    "invalid_dataset.paired_real",
                    "a real-style training image is linked to a voxel grid",
                    item=sample.item_id,
                )

    def batch(self, step, batch_size, seed, adaptation=True):
        """Draw the batch for a global step.

        Each step seeds its own generator, so batches depend only on
        ``(seed, step)``. With `adaptation` off, `w` is drawn from the
        synthesized pool instead of the sketches.

        :rtype: Batch
        """
        if self._synth_pixels is None:
            raise VxError.data(
                "invalid_dataset.empty_pool", "the synthesized pool is empty"
            )

        rng = np.random.default_rng([seed, step])
        synth_index = rng.integers(0, len(self.synth_pool), size=batch_size)

        if adaptation:
            if self._real_pixels is None:
                raise VxError.data(
                    "invalid_dataset.empty_pool",
                    "the real-style pool is empty",
                )
            real_index = rng.integers(0, len(self.real_pool), size=batch_size)
            self._check_unpaired(real_index)
            w = self._real_pixels[real_index]
            real_ids = tuple(
                self.real_pool[i].item_id for i in real_index
            )
        else:
            w_index = rng.integers(0, len(self.synth_pool), size=batch_size)
            w = self._synth_pixels[w_index]
            real_ids = tuple(self.synth_pool[i].item_id for i in w_index)

        return Batch(
            step=step,
            w=w,
            w_v=self._synth_pixels[synth_index],
            v_w=self._synth_voxels[synth_index],
            synth_ids=tuple(self.synth_pool[i].shape_id for i in synth_index),
            real_ids=real_ids,
        )

    def batches(self, batch_size, seed, start=0, stop=None, adaptation=True):
        pool = min(len(self.synth_pool), len(self.real_pool) or batch_size)
        if pool < batch_size:
            logger.warning(
                "training pools hold %d images, fewer than the batch size %d; "
                "batches repeat images",
                pool,
                batch_size,
            )

        step = start
        while stop is None or step < stop:
            yield self.batch(step, batch_size, seed, adaptation)
            step += 1

    def __repr__(self):
        return (
            f"Dataset({len(self.grids)} shapes, {len(self.synth)} renders, "
            f"{len(self.real)} sketches)"
        )


# -----------------------------------------------------------------------------


def _split_shapes(count, split, real_fraction, rng):
    train_count = int(round(count * split))
    test_count = count - train_count
    if train_count < 1 or test_count < 1:
        raise VxError.data(
            "invalid_dataset.split",
            f"a split of {split} over {count} shapes leaves "
            f"{train_count} train and {test_count} test shapes",
        )

    real_count = int(round(train_count * real_fraction))
    if real_fraction > 0:
        real_count = max(real_count, 1)
    if train_count - real_count < 1:
        raise VxError.data(
            "invalid_dataset.split",
            f"{train_count} training shapes cannot be divided into "
            "synthesized and real-style pools",
        )

    order = rng.permutation(count)
    splits = {}
    for rank, shape_id in enumerate(order.tolist()):
        if rank < real_count:
            splits[shape_id] = REAL_POOL
        elif rank < train_count:
            splits[shape_id] = TRAIN
        else:
            splits[shape_id] = TEST
    return splits


def generate_dataset(config):
    """Generate a dataset; a pure function of the config.

    :raises VxError: On fewer than two shapes, no views, a grid too coarse
        for the shape parts or a degenerate split.
    """
    if config.shapes < 2:
        raise VxError.data(
            "invalid_dataset.count", "a dataset needs at least 2 shapes"
        )
    if config.views < 1:
        raise VxError.data(
            "invalid_dataset.views", "a dataset needs at least 1 view"
        )
    if not config.categories:
        raise VxError.data(
            "invalid_dataset.categories", "no shape categories given"
        )
    if config.resolution < MIN_RESOLUTION:
        raise VxError.data(
            "invalid_dataset.resolution",
            f"shapes need a resolution of at least {MIN_RESOLUTION}, "
            f"got {config.resolution}",
        )

    rng = np.random.default_rng(config.seed)
    splits = _split_shapes(
        config.shapes, config.split, config.real_fraction, rng
    )
    shape_seeds = rng.integers(0, 2**31, size=config.shapes)

    recipes = {}
    grids = {}
    for shape_id in range(config.shapes):
        category = config.categories[shape_id % len(config.categories)]
        recipes[shape_id] = random_recipe(category, int(shape_seeds[shape_id]))
        grids[shape_id] = generate_shape(recipes[shape_id], config.resolution)

    synth = []
    renders = {}
    for shape_id in range(config.shapes):
        for view in range(config.views):
            render = render_view(
                grids[shape_id],
                view_azimuth(view, config.views),
                config.image_size,
            )
            renders[shape_id, view] = render
            synth.append(
                ImageSample(
                    render.pixels,
                    SYNTH,
                    render.azimuth,
                    shape_id=shape_id,
                    item_id=len(synth),
                    view=view,
                )
            )

    real = []
    for shape_id in range(config.shapes):
        if splits[shape_id] == TRAIN:
            continue
        for view in range(config.views):
            sketch = stylize(
                renders[shape_id, view],
                REAL,
                item_seed(config.seed, shape_id, view),
            )
            real.append(
                ImageSample(
                    sketch.pixels,
                    REAL,
                    sketch.azimuth,
                    shape_id=shape_id if splits[shape_id] == TEST else None,
                    item_id=len(synth) + len(real),
                    view=view,
                )
            )

    dataset = Dataset(config, recipes, grids, splits, synth, real)
    logger.info("generated %r", dataset)
    return dataset


def build_dataset(count, views, split, seed, **kwargs):
    """Generate a dataset of `count` shapes rendered from `views` azimuths.

    Remaining keyword arguments set the other :py:class:`DatasetConfig`
    fields.
    """
    return generate_dataset(
        DatasetConfig(
            shapes=count, views=views, split=split, seed=seed, **kwargs
        )
    )


# -----------------------------------------------------------------------------


def save_dataset_files(dataset, directory):
    """Write voxel files, PGM images, a manifest and the dataset config."""
    rows = []
    for shape_id in sorted(dataset.grids):
        path = os.path.join("voxels", f"shape{shape_id:04d}.vox")
        write_voxels(os.path.join(directory, path), dataset.grids[shape_id])
        rows.append(
            {
                "item_id": shape_id,
                "kind": "voxel",
                "path": path,
                "split": dataset.splits[shape_id],
            }
        )

    real_split = {
        sample.item_id: (TEST if sample.shape_id is not None else REAL_POOL)
        for sample in dataset.real
    }
    for sample in dataset.synth + dataset.real:
        path = os.path.join(
            "images", f"item{sample.item_id:05d}_{sample.domain}.pgm"
        )
        write_pgm(os.path.join(directory, path), sample.pixels)
        rows.append(
            {
                "item_id": sample.item_id,
                "kind": sample.domain,
                "path": path,
                "azimuth": sample.azimuth,
                "pair_id": sample.shape_id,
                "split": (
                    dataset.splits[sample.shape_id]
                    if sample.domain == SYNTH
                    else real_split[sample.item_id]
                ),
            }
        )

    write_manifest(os.path.join(directory, MANIFEST_FILE), rows)
    with open(
        os.path.join(directory, DATASET_FILE), "w", encoding="utf-8"
    ) as f:
        json.dump(
            dataset_config_schema.dump(dataset.config),
            f,
            sort_keys=True,
            indent=2,
        )
        f.write("\n")

    logger.info("wrote %d manifest rows to %s", len(rows), directory)
    return rows


def load_dataset_files(directory):
    """Read a directory written by :py:func:`save_dataset_files`.

    Images come back at their exported 8-bit precision.
    """
    try:
        path = os.path.join(directory, DATASET_FILE)
        with open(path, encoding="utf-8") as f:
            config = dataset_config_schema.load(json.load(f))
    except OSError as e:
        raise VxError.data(
            "io.read", f"cannot read {DATASET_FILE} in {directory}: {e}"
        ) from e
    except ValidationError as e:
        raise VxError.from_validation_error(
            DATA_ERROR,
            e,
            lambda message, path: VxError.make_error(
                "invalid_format.dataset",
                message,
                source={"field": "/".join(map(str, path))},
            ),
        ) from e

    recipes = {}
    grids = {}
    splits = {}
    synth = []
    real = []
    for row in read_manifest(os.path.join(directory, MANIFEST_FILE)):
        path = os.path.join(directory, row["path"])
        if row["kind"] == "voxel":
            shape_id = row["item_id"]
            grids[shape_id] = read_voxels(path)
            splits[shape_id] = row["split"]
            continue

        view = int(round(row["azimuth"] * config.views / 360.0))
        sample = ImageSample(
            read_pgm(path),
            row["kind"],
            row["azimuth"],
            shape_id=row["pair_id"],
            item_id=row["item_id"],
            view=view,
        )
        (synth if row["kind"] == SYNTH else real).append(sample)

    rng = np.random.default_rng(config.seed)
    # Replay the split draw so the recipe seeds line up.
    rng.permutation(config.shapes)
    shape_seeds = rng.integers(0, 2**31, size=config.shapes)
    for shape_id in grids:
        category = config.categories[shape_id % len(config.categories)]
        recipes[shape_id] = random_recipe(category, int(shape_seeds[shape_id]))

    return Dataset(config, recipes, grids, splits, synth, real)


# -----------------------------------------------------------------------------


class PrefetchIterator:
    """Iterate over `iterable` on a background thread.

    Up to `depth` items are produced ahead of the consumer. Items keep their
    order, and an exception raised while producing is re-raised by
    :py:meth:`__next__`.
    """

    _DONE = object()

    def __init__(self, iterable, depth=2):
        if depth < 1:
            raise VxError.data(
                "invalid_value.prefetch", f"depth must be >= 1, got {depth}"
            )

        self._queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._fill, args=(iter(iterable),), daemon=True
        )
        self._thread.start()

    def _put(self, entry):
        while not self._stop.is_set():
            try:
                self._queue.put(entry, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self, iterator):
        try:
            for item in iterator:
                if not self._put((item, None)):
                    return
        except Exception as e:  # re-raised in the consumer
            self._put((None, e))
            return
        self._put((self._DONE, None))

    def __iter__(self):
        return self

    def __next__(self):
        item, error = self._queue.get()
        if error is not None:
            self.close()
            raise error
        if item is self._DONE:
            raise StopIteration
        return item

    def close(self):
        self._stop.set()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
