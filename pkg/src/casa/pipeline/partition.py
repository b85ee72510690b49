"""The ``.casa`` columnar partition format and on-disk datasets.

Layout (little-endian)::

    b"CASA" | u32 version=1 | u32 n_columns
    per column: u16 name_len | name (utf-8) | u8 dtype (0=f64, 1=i64) | u64 n_rows | n_rows values

A dataset is a directory of ``part<i>.casa`` files plus ``manifest.json``.
"""

import json
import os
import struct

import numpy as np

from ..errors import BadRequest, NotFound

MAGIC = b"CASA"
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
DTYPE_NAMES = {0: "f64", 1: "i64"}
DTYPE_CODES = {"f64": 0, "i64": 1}
MANIFEST = "manifest.json"


def _dtype_code(arr):
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "iub":
        return 1
    raise BadRequest(f"unsupported column dtype {arr.dtype}")


def as_columns(columns):
    """Coerce a name -> sequence mapping into f64/i64 numpy arrays."""
    out = {}
    for name, values in columns.items():
        arr = np.asarray(values)
        if arr.ndim != 1:
            raise BadRequest(f"column {name!r} must be one-dimensional")
        if arr.size == 0 and arr.dtype.kind not in "fiub":
            arr = arr.astype("<f8")
        out[name] = arr.astype(DTYPES[_dtype_code(arr)], copy=False)
    return out


def write_partition(columns):
    cols = as_columns(columns)
    lengths = {len(a) for a in cols.values()}
    if len(lengths) > 1:
        raise BadRequest(f"columns have unequal lengths {sorted(lengths)}")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cols))]
    for name, arr in cols.items():
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise BadRequest(f"bad column name {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BQ", _dtype_code(arr), len(arr)))
        parts.append(arr.tobytes())
    return b"".join(parts)


def read_partition(data):
    data = memoryview(bytes(data))
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise BadRequest(f"truncated partition at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise BadRequest("bad magic; not a .casa partition")
    version, n_columns = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise BadRequest(f"unsupported partition version {version}")
    columns = {}
    n_rows = None
    for _ in range(n_columns):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise BadRequest("column name is not utf-8") from None
        code, rows = struct.unpack("<BQ", take(9))
        if code not in DTYPES:
            raise BadRequest(f"unknown dtype code {code}")
        if name in columns:
            raise BadRequest(f"duplicate column {name!r}")
        if n_rows is not None and rows != n_rows:
            raise BadRequest("columns have unequal row counts")
        n_rows = rows
        dtype = DTYPES[code]
        columns[name] = np.frombuffer(take(rows * dtype.itemsize), dtype=dtype).copy()
    if pos != len(data):
        raise BadRequest(f"{len(data) - pos} trailing bytes after last column")
    return columns


def schema_of(columns):
    return [{"name": name, "dtype": DTYPE_NAMES[_dtype_code(arr)]} for name, arr in columns.items()]


def write_dataset(directory, partitions):
    """Write a list of column tables as a dataset; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    schema = None
    for i, columns in enumerate(partitions):
        data = write_partition(columns)
        name = f"part{i}.casa"
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(data)
        cols = as_columns(columns)
        part_schema = schema_of(cols)
        if schema is None:
            schema = part_schema
        elif part_schema != schema:
            raise BadRequest(f"partition {i} schema differs from partition 0")
        rows = len(next(iter(cols.values()))) if cols else 0
        entries.append({"path": name, "rows": rows, "bytes": len(data)})
    manifest = {
        "format": "casa-dataset",
        "version": FORMAT_VERSION,
        "schema": schema or [],
        "partitions": entries,
        "rows": sum(e["rows"] for e in entries),
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def parse_manifest(data):
    try:
        manifest = json.loads(data)
    except (UnicodeDecodeError, ValueError):
        raise BadRequest("dataset manifest is not valid JSON") from None
    if not isinstance(manifest, dict) or manifest.get("format") != "casa-dataset":
        raise BadRequest("not a casa dataset manifest")
    return manifest


def load_manifest(directory):
    try:
        with open(os.path.join(directory, MANIFEST), "rb") as fh:
            return parse_manifest(fh.read())
    except FileNotFoundError:
        raise NotFound(f"no dataset at {directory}") from None


def read_dataset(directory):
    """All partitions of an on-disk dataset, in index order."""
    manifest = load_manifest(directory)
    out = []
    for entry in manifest["partitions"]:
        with open(os.path.join(directory, entry["path"]), "rb") as fh:
            out.append(read_partition(fh.read()))
    return out
