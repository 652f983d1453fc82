"""Text formats for voxel grids, images and CSV tables."""

import csv
import io
import logging
import os

import numpy as np
from marshmallow import ValidationError

from .exceptions import DATA_ERROR, VxError
from .schemas import MANIFEST_COLUMNS, ManifestRowSchema

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

VOXEL_HEADER = "voxel"
PGM_MAGIC = "P2"
PGM_MAX = 255

manifest_row_schema = ManifestRowSchema()

# -----------------------------------------------------------------------------


def _read_text(path):
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise VxError.data(
            "io.read", f"cannot read {path}: {e}", path=str(path)
        ) from e


def _write_text(path, text):
    try:
        directory = os.path.dirname(os.fspath(path))
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise VxError.data(
            "io.write", f"cannot write {path}: {e}", path=str(path)
        ) from e


def _format_error(detail, path):
    return VxError.data("invalid_format.file", detail, path=str(path))


# -----------------------------------------------------------------------------


def format_voxels(grid):
    grid = np.asarray(grid, dtype=np.float64)
    lines = [f"{VOXEL_HEADER} {' '.join(str(n) for n in grid.shape)}"]
    # C order over [y, x, z] puts z fastest.
    for row in grid.reshape(-1, grid.shape[-1]):
        lines.append(" ".join(repr(float(value)) for value in row))
    return "\n".join(lines) + "\n"


def parse_voxels(text, path="<text>"):
    tokens = text.split()
    if len(tokens) < 4 or tokens[0] != VOXEL_HEADER:
        raise _format_error("missing 'voxel D D D' header", path)
    try:
        shape = tuple(int(token) for token in tokens[1:4])
        values = np.array([float(token) for token in tokens[4:]])
    except ValueError as e:
        raise _format_error(f"malformed voxel file: {e}", path) from e

    if len(set(shape)) != 1 or values.size != np.prod(shape):
        raise _format_error(
            f"expected {np.prod(shape)} values for {shape}, "
            f"found {values.size}",
            path,
        )
    return values.reshape(shape)


def write_voxels(path, grid):
    _write_text(path, format_voxels(grid))


def read_voxels(path):
    return parse_voxels(_read_text(path), path)


# -----------------------------------------------------------------------------


def quantize(pixels):
    """Map ``[0, 1]`` intensities to 8-bit levels."""
    return np.rint(np.clip(pixels, 0.0, 1.0) * PGM_MAX).astype(int)


def write_pgm(path, pixels):
    levels = quantize(np.asarray(pixels, dtype=np.float64))
    height, width = levels.shape
    lines = [PGM_MAGIC, f"{width} {height}", str(PGM_MAX)]
    lines.extend(" ".join(str(level) for level in row) for row in levels)
    _write_text(path, "\n".join(lines) + "\n")


def read_pgm(path):
    """Read a plain PGM back to intensities in ``[0, 1]``."""
    tokens = [
        token
        for line in _read_text(path).splitlines()
        for token in line.split("#", 1)[0].split()
    ]
    if not tokens or tokens[0] != PGM_MAGIC:
        raise _format_error("not a plain (P2) PGM file", path)
    try:
        width, height, max_value = (int(token) for token in tokens[1:4])
        levels = np.array([int(token) for token in tokens[4:]])
    except ValueError as e:
        raise _format_error(f"malformed PGM file: {e}", path) from e

    if levels.size != width * height:
        raise _format_error(
            f"expected {width * height} pixels, found {levels.size}", path
        )
    return levels.reshape(height, width) / max_value


# -----------------------------------------------------------------------------


def format_csv(columns, rows):
    """Render dict rows as CSV text with a fixed column order.

    ``None`` cells are written empty.
    """
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(
            {key: "" if row.get(key) is None else row[key] for key in columns}
        )
    return buffer.getvalue()


def write_csv(path, columns, rows):
    _write_text(path, format_csv(columns, rows))


def read_csv(path):
    return list(csv.DictReader(io.StringIO(_read_text(path))))


def write_manifest(path, rows):
    """Write manifest rows (dicts or objects) through the manifest schema."""
    write_csv(
        path, MANIFEST_COLUMNS, manifest_row_schema.dump(rows, many=True)
    )


def read_manifest(path):
    try:
        return manifest_row_schema.load(read_csv(path), many=True)
    except ValidationError as e:
        raise VxError.from_validation_error(
            DATA_ERROR,
            e,
            lambda message, field_path: VxError.make_error(
                "invalid_format.manifest",
                message,
                source={"row": "/".join(map(str, field_path))},
                path=str(path),
            ),
        ) from e
