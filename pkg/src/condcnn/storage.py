"""Deterministic on-disk container for named arrays plus JSON metadata.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(sorted keys), then raw C-order array payloads in the order the header
lists them (sorted by name). Identical content always produces identical
bytes: no timestamps, no compression, no platform-dependent fields. Writes
are atomic (temp file + rename).
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import DataError

MAGIC = b"CCNNAR01"


def save_container(path, arrays, meta=None):
    """Write named arrays and a JSON-serializable meta dict to `path`."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": 1, "meta": meta or {}, "arrays": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in payloads:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path):
    """Read back (arrays, meta) written by `save_container`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a condcnn container (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != 1:
            raise DataError(f"{path}: unsupported container version")
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        buf = payload[start:start + nbytes]
        if len(buf) != nbytes:
            raise DataError(f"{path}: truncated payload for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            buf, dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
