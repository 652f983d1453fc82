"""Binary checkpoint files.

Layout::

    b"VXADAPT1"                      magic
    uint32, little endian            format version
    uint64, little endian            manifest length in bytes
    manifest                         UTF-8 JSON, keys sorted
    payloads                         little-endian float64, in manifest order

The manifest names every array with its shape and dtype and carries
free-form metadata (network configs, optimizer settings, step counters).
"""

import json
import logging
import os
import struct

import numpy as np
from marshmallow import ValidationError

from .exceptions import DATA_ERROR, VxError
from .params import ParameterSet
from .schemas import CheckpointManifestSchema, NetworkConfigSchema

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

MAGIC = b"VXADAPT1"
FORMAT_VERSION = 1
DTYPE = "<f8"

_HEADER = struct.Struct("<IQ")

manifest_schema = CheckpointManifestSchema()
network_config_schema = NetworkConfigSchema()

# -----------------------------------------------------------------------------


def _format_error(code, detail, path):
    return VxError.data(f"invalid_format.{code}", detail, path=str(path))


def encode_checkpoint(kind, meta, arrays):
    """Serialize named arrays and metadata to checkpoint bytes."""
    entries = []
    payloads = []
    for name, array in arrays.items():
        array = np.asarray(array, dtype=DTYPE, order="C")
        entries.append(
            {"name": name, "shape": list(array.shape), "dtype": DTYPE}
        )
        payloads.append(array.tobytes())

    manifest = manifest_schema.dump(
        {"kind": kind, "meta": meta, "entries": entries}
    )
    manifest_bytes = json.dumps(
        manifest, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    return b"".join(
        [
            MAGIC,
            _HEADER.pack(FORMAT_VERSION, len(manifest_bytes)),
            manifest_bytes,
        ]
        + payloads
    )


def decode_checkpoint(data, path="<bytes>"):
    """Parse checkpoint bytes into ``(kind, meta, arrays)``.

    :raises VxError: On a wrong magic string, an unsupported version, a
        malformed manifest or a truncated payload.
    """
    if data[: len(MAGIC)] != MAGIC:
        raise _format_error("magic", "not a VX-Adapt checkpoint", path)

    offset = len(MAGIC)
    if len(data) < offset + _HEADER.size:
        raise _format_error("truncated", "header is truncated", path)
    version, manifest_length = _HEADER.unpack_from(data, offset)
    if version != FORMAT_VERSION:
        raise _format_error(
            "version",
            f"format version {version} is not supported "
            f"(expected {FORMAT_VERSION})",
            path,
        )

    offset += _HEADER.size
    manifest_bytes = data[offset : offset + manifest_length]
    if len(manifest_bytes) != manifest_length:
        raise _format_error("truncated", "manifest is truncated", path)
    offset += manifest_length

    try:
        manifest = json.loads(manifest_bytes)
    except ValueError as e:
        raise _format_error("manifest", "manifest is not JSON", path) from e

    try:
        manifest = manifest_schema.load(manifest)
    except ValidationError as e:
        raise VxError.from_validation_error(
            DATA_ERROR,
            e,
            lambda message, field_path: VxError.make_error(
                "invalid_format.manifest",
                message,
                source={"field": "/".join(map(str, field_path))},
                path=str(path),
            ),
        ) from e

    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = data[offset : offset + size]
        if len(chunk) != size:
            raise _format_error(
                "truncated", f"payload of {entry['name']} is truncated", path
            )
        arrays[entry["name"]] = (
            np.frombuffer(chunk, dtype=DTYPE).astype(np.float64).reshape(shape)
        )
        offset += size

    if offset != len(data):
        raise _format_error(
            "trailing", f"{len(data) - offset} unexpected trailing bytes", path
        )

    return manifest["kind"], manifest["meta"], arrays


def write_checkpoint(path, kind, meta, arrays):
    data = encode_checkpoint(kind, meta, arrays)
    directory = os.path.dirname(os.fspath(path))
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise VxError.data(
            "io.write", f"cannot write {path}: {e}", path=str(path)
        ) from e

    logger.debug("wrote %s checkpoint %s (%d bytes)", kind, path, len(data))


def read_checkpoint(path, kind=None):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise VxError.data(
            "io.read", f"cannot read {path}: {e}", path=str(path)
        ) from e

    found_kind, meta, arrays = decode_checkpoint(data, path)
    if kind is not None and found_kind != kind:
        raise _format_error(
            "kind", f"expected a {kind} checkpoint, found {found_kind}", path
        )
    return meta, arrays


# -----------------------------------------------------------------------------


def params_meta(params):
    meta = {"trainable": list(params.trainable_names)}
    if params.config is not None:
        meta["network"] = network_config_schema.dump(params.config)
    return meta


def params_from_meta(meta, arrays, path="<bytes>"):
    missing = [name for name in meta["trainable"] if name not in arrays]
    if missing:
        raise _format_error(
            "manifest", f"trainable arrays {missing} are missing", path
        )

    config = None
    if "network" in meta:
        try:
            config = network_config_schema.load(meta["network"])
        except ValidationError as e:
            raise _format_error(
                "manifest", f"invalid network config: {e.messages}", path
            ) from e
    return ParameterSet(arrays, meta["trainable"], config)


def save_weights(params, path):
    """Write one parameter set, buffers included."""
    write_checkpoint(
        path, "weights", params_meta(params), dict(params.items())
    )


def load_weights(path):
    """Read a parameter set written by :py:func:`save_weights`.

    :rtype: ParameterSet
    """
    meta, arrays = read_checkpoint(path, "weights")
    return params_from_meta(meta, arrays, path)
