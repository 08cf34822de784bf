"""Binary record files for datasets and checkpoints.

Layout (all integers little-endian):

    8 bytes   magic  b"LCIRREC1"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header, keys sorted, no whitespace
    payload

The header's "layout" key says how to read the payload:

    "records": {"count": n, "fields": [[name, dtype, shape], ...]}
        n fixed-width packed records; dtype strings are numpy little-endian
        codes such as "<f4", "<i8", "|u1".
    "tensors": [[name, shape], ...]
        each tensor's values in order as "<f4", concatenated.

Writes go through a temporary file and an atomic rename.  Identical inputs
give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LCIRREC1"


class RecordFileError(ValueError):
    pass


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _write(path, header: dict, payload: bytes):
    path = Path(path)
    head = _dump_header(header)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from e


def _read(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise RecordFileError(f"{path}: not a record file")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise RecordFileError(f"{path}: corrupt header") from e
    return header, data[12 + n:]


def record_dtype(fields) -> np.dtype:
    return np.dtype([(name, np.dtype(dt).newbyteorder("<"), tuple(shape)) for name, dt, shape in fields])


def write_records(path, header: dict, fields, columns: dict):
    """fields: [(name, dtype, shape)]; columns: name -> array with leading dim n."""
    fields = [(name, np.dtype(dt).newbyteorder("<").str, list(shape)) for name, dt, shape in fields]
    dt = record_dtype(fields)
    counts = {len(columns[name]) for name, _, _ in fields}
    if len(counts) > 1:
        raise ValueError("columns have different lengths")
    n = counts.pop() if counts else 0
    arr = np.zeros(n, dtype=dt)
    for name, _, _ in fields:
        arr[name] = columns[name]
    header = dict(header, layout={"records": {"count": n, "fields": fields}})
    _write(path, header, arr.tobytes())


def read_records(path) -> tuple[dict, np.ndarray]:
    header, payload = _read(path)
    layout = header.get("layout", {}).get("records")
    if layout is None:
        raise RecordFileError(f"{path}: not a records file")
    dt = record_dtype(layout["fields"])
    if len(payload) != dt.itemsize * layout["count"]:
        raise RecordFileError(f"{path}: truncated payload")
    return header, np.frombuffer(payload, dtype=dt)


def write_tensors(path, header: dict, tensors):
    """tensors: [(name, array)], stored as little-endian float32 in the given order."""
    names, chunks = [], []
    for name, a in tensors:
        a = np.asarray(a, dtype="<f4")
        names.append([name, list(a.shape)])
        chunks.append(a.tobytes())
    _write(path, dict(header, layout={"tensors": names}), b"".join(chunks))


def read_tensors(path) -> tuple[dict, dict]:
    header, payload = _read(path)
    layout = header.get("layout", {}).get("tensors")
    if layout is None:
        raise RecordFileError(f"{path}: not a tensors file")
    out, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(payload):
            raise RecordFileError(f"{path}: truncated payload")
        out[name] = np.frombuffer(payload[pos:pos + size], dtype="<f4").reshape(shape).copy()
        pos += size
    if pos != len(payload):
        raise RecordFileError(f"{path}: trailing bytes")
    return header, out


def file_digest(paths) -> str:
    """sha256 over the contents of the given files, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()
