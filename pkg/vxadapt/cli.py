"""The ``vxadapt`` command line."""

import glob
import json
import logging
import os
import re
import sys

import click
from marshmallow import ValidationError

from .config import load_train_config, parse_overrides
from .dataset import (
    build_dataset,
    dataset_config_schema,
    load_dataset_files,
    save_dataset_files,
)
from .evaluation import (
    DEFAULT_THRESHOLD,
    compare_adaptation,
    evaluate_iou,
    evaluate_samples,
    export_outputs,
    phi2_sweep,
    retrieve_nearest,
    sweep_row_schema,
)
from .exceptions import USAGE_ERROR, VxError
from .fileio import format_csv, read_voxels
from .networks import PRESETS, get_preset
from .schemas import (
    COMPARISON_COLUMNS,
    IOU_COLUMNS,
    RETRIEVAL_COLUMNS,
    SWEEP_COLUMNS,
)
from .shapes import CATEGORIES
from .training import dataset_for, load_checkpoint, run_schedule

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

_ITEM_ID = re.compile(r"\d+")

# -----------------------------------------------------------------------------


def config_options(fn):
    """Add the options shared by commands that train."""
    for option in reversed(
        (
            click.option(
                "--config",
                "config_path",
                type=click.Path(dir_okay=False),
                help="A key = value config file.",
            ),
            click.option(
                "--set",
                "overrides",
                multiple=True,
                metavar="KEY=VALUE",
                help="Override one config key. Repeatable.",
            ),
            click.option("--seed", type=int, help="Override the seed."),
            click.option(
                "--data",
                "data_dir",
                type=click.Path(file_okay=False),
                help="A directory written by gen-data.",
            ),
        )
    ):
        fn = option(fn)
    return fn


def _load_config(config_path, overrides, seed, data_dir):
    return load_train_config(
        config_path,
        parse_overrides(overrides),
        seed=seed,
        data_dir=data_dir,
    )


def _load_trained(checkpoint, data_dir):
    state = load_checkpoint(checkpoint)
    if data_dir is not None:
        dataset = load_dataset_files(data_dir)
    else:
        dataset = dataset_for(state.config)
    return state, dataset


def _echo_csv(columns, rows):
    click.echo(format_csv(columns, rows), nl=False)


# -----------------------------------------------------------------------------


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="WARNING",
    show_default=True,
)
def cli(log_level):
    """Unsupervised single-image voxel reconstruction."""
    logging.basicConfig(format=LOG_FORMAT)
    logging.getLogger().setLevel(log_level.upper())


@cli.command("gen-data")
@click.option("--shapes", type=int, default=40, show_default=True)
@click.option("--views", type=int, default=24, show_default=True)
@click.option("--split", type=float, default=0.7, show_default=True)
@click.option("--real-fraction", type=float, default=0.5, show_default=True)
@click.option(
    "--categories",
    default=",".join(CATEGORIES),
    show_default=True,
    help="Comma-separated shape categories.",
)
@click.option(
    "--preset",
    type=click.Choice(tuple(PRESETS)),
    default="desk",
    show_default=True,
    help="Sets the grid resolution and image size.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def gen_data(
    shapes, views, split, real_fraction, categories, preset, seed, out
):
    """Generate shapes, renders and sketches into a directory."""
    sizes = get_preset(preset)
    try:
        config = dataset_config_schema.load(
            {
                "shapes": shapes,
                "views": views,
                "split": split,
                "real_fraction": real_fraction,
                "resolution": sizes.resolution,
                "image_size": sizes.image_size,
                "categories": categories,
                "seed": seed,
            }
        )
    except ValidationError as e:
        raise VxError.from_validation_error(
            USAGE_ERROR,
            e,
            lambda message, path: VxError.make_error(
                "invalid_config.value",
                f"{'/'.join(map(str, path))}: {message}",
            ),
        ) from e

    dataset = build_dataset(
        config.shapes,
        config.views,
        config.split,
        config.seed,
        real_fraction=config.real_fraction,
        resolution=config.resolution,
        image_size=config.image_size,
        categories=tuple(config.categories),
    )
    save_dataset_files(dataset, out)
    click.echo(f"{dataset!r} -> {out}")


@cli.command()
@config_options
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--resume",
    type=click.Path(dir_okay=False),
    help="A checkpoint to continue from.",
)
def train(config_path, overrides, seed, data_dir, out, resume):
    """Run the three training phases."""
    config = _load_config(config_path, overrides, seed, data_dir)
    state = load_checkpoint(resume) if resume is not None else None
    state = run_schedule(config, out_dir=out, state=state)
    click.echo(f"trained to step {state.step} (phase {state.phase})")


# -----------------------------------------------------------------------------


def _vox_files(directory):
    """Map the first integer in each ``.vox`` file name to its path."""
    files = {}
    for path in sorted(glob.glob(os.path.join(directory, "*.vox"))):
        match = _ITEM_ID.search(os.path.basename(path))
        if match is None:
            logger.warning("skipping %s: no item id in the name", path)
            continue
        files.setdefault(int(match.group()), path)
    return files


def _eval_files(pred_dir, truth_dir, t, aligned):
    predictions = _vox_files(pred_dir)
    truths = _vox_files(truth_dir)
    missing = sorted(set(predictions) - set(truths))
    if missing:
        raise VxError.data(
            "invalid_dataset.missing_pair",
            f"no truth grid for items {missing[:5]}",
        )

    item_ids = sorted(predictions)
    return evaluate_iou(
        [read_voxels(predictions[i]) for i in item_ids],
        [read_voxels(truths[i]) for i in item_ids],
        t=t,
        aligned=aligned,
        item_ids=item_ids,
    )


def _mean_rows(result, aligned):
    if result.categories and all(c is not None for c in result.categories):
        plain = result.category_means()
        best = result.category_means(aligned=True) if aligned else {}
        rows = [
            {
                "item_id": "mean",
                "category": category,
                "iou": value,
                "aligned_iou": best.get(category),
            }
            for category, value in plain.items()
        ]
    else:
        rows = []

    rows.append(
        {
            "item_id": "mean",
            "iou": result.mean,
            "aligned_iou": result.aligned_mean,
        }
    )
    return rows


@cli.command("eval")
@click.option("--pred", "pred_dir", type=click.Path(file_okay=False))
@click.option("--truth", "truth_dir", type=click.Path(file_okay=False))
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    help="Score a trained state on the real-style test images.",
)
@click.option("--data", "data_dir", type=click.Path(file_okay=False))
@click.option("--t", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option(
    "--aligned", is_flag=True, help="Also report the aligned IoU."
)
def eval_(pred_dir, truth_dir, checkpoint, data_dir, t, aligned):
    """Print per-item and mean IoU as CSV."""
    if checkpoint is not None:
        state, dataset = _load_trained(checkpoint, data_dir)
        result = evaluate_samples(
            state, dataset.real_test, dataset, t, aligned
        )
    elif pred_dir is not None and truth_dir is not None:
        result = _eval_files(pred_dir, truth_dir, t, aligned)
    else:
        raise click.UsageError("give --checkpoint, or both --pred and --truth")

    _echo_csv(IOU_COLUMNS, result.rows() + _mean_rows(result, aligned))


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False))
@click.option("--query", "query_id", type=int, help="A dataset item id.")
@click.option(
    "--shape",
    "shape_id",
    type=int,
    help="Query with a fresh real-style view of this shape.",
)
@click.option("--view", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=5, show_default=True)
def retrieve(checkpoint, data_dir, query_id, shape_id, view, k):
    """Rank training renders by latent distance to a query image."""
    if (query_id is None) == (shape_id is None):
        raise click.UsageError("give exactly one of --query and --shape")

    state, dataset = _load_trained(checkpoint, data_dir)
    if shape_id is not None:
        if shape_id not in dataset.grids:
            raise VxError.usage(
                "invalid_value.query", f"no shape with id {shape_id}"
            )
        query = dataset.stylized_view(shape_id, view)
    else:
        items = {s.item_id: s for s in dataset.synth + dataset.real}
        if query_id not in items:
            raise VxError.usage(
                "invalid_value.query", f"no item with id {query_id}"
            )
        query = items[query_id]

    result = retrieve_nearest(
        query, dataset.synth_pool, state.params["G2"], k
    )
    _echo_csv(RETRIEVAL_COLUMNS, result.rows())


# -----------------------------------------------------------------------------


@cli.command("sweep-phi2")
@config_options
@click.option(
    "--values",
    default="0.3,0.5,0.7,0.9",
    show_default=True,
    help="Comma-separated phi2 values.",
)
@click.option("--out", type=click.Path(file_okay=False))
def sweep_phi2(config_path, overrides, seed, data_dir, values, out):
    """Train stage 1 for several phi2 values and compare the domains."""
    try:
        phi2_values = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--values") from e

    config = _load_config(config_path, overrides, seed, data_dir)
    rows = phi2_sweep(phi2_values, config, dataset_for(config), out)
    _echo_csv(SWEEP_COLUMNS, sweep_row_schema.dump(rows, many=True))


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--limit",
    type=int,
    help="Export at most this many items of each domain.",
)
def export(checkpoint, data_dir, out, limit):
    """Write inputs, reconstructions and predicted grids of the test set."""
    state, dataset = _load_trained(checkpoint, data_dir)
    real = dataset.real_test[:limit]
    synth = dataset.synth_test[:limit]
    rows = export_outputs(state, real + synth, out, grids=dataset.grids)
    click.echo(f"exported {len(rows)} files to {out}")


@cli.command()
@config_options
@click.option("--t", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option("--out", type=click.Path(file_okay=False))
def compare(config_path, overrides, seed, data_dir, t, out):
    """Train with and without adaptation and compare test IoU."""
    config = _load_config(config_path, overrides, seed, data_dir)
    rows = compare_adaptation(config, dataset_for(config), t, out)
    _echo_csv(COMPARISON_COLUMNS, rows)


# -----------------------------------------------------------------------------


def cli_main(argv=None):
    """Run the command line and return the process exit code.

    A :py:class:`VxError` is printed to standard error as its JSON body.
    """
    root = logging.getLogger()
    level = root.level
    try:
        rv = cli.main(
            args=argv, prog_name="vxadapt", standalone_mode=False
        )
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except VxError as e:
        logger.debug("command failed", exc_info=True)
        click.echo(json.dumps(e.body, sort_keys=True), err=True)
        return e.exit_code
    finally:
        root.setLevel(level)

    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(cli_main())
