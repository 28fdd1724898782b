"""Readers and writers for the ``.t64`` array container and JSON sidecars.

Layout of a ``.t64`` file::

    b"SCMT"  version byte 0x01  uint32-LE header length  UTF-8 JSON header  float64-LE payload

The header is ``{"order": 2 | 3, "dims": [...], "names": [...]}``. The payload is
written in canonical order, i.e. mode-1 fastest (column-major) for both
matrices and third-order tensors.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCMT"
VERSION = 1

__all__ = [
    "write_t64",
    "read_t64",
    "read_t64_header",
    "write_t64_sections",
    "read_t64_sections",
    "write_json",
    "read_json",
]


class T64FormatError(ValueError):
    pass


def _encode(array, names=None):
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim not in (2, 3):
        raise ValueError(f".t64 supports orders 2 and 3, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite values")
    if names is None:
        names = ["time", "freq", "channel"][: arr.ndim] if arr.ndim == 3 else ["row", "col"]
    names = [str(n) for n in names]
    if len(names) != arr.ndim:
        raise ValueError("one name per mode is required")
    header = json.dumps(
        {"order": arr.ndim, "dims": list(arr.shape), "names": names}, separators=(",", ":")
    ).encode("utf-8")
    payload = np.ravel(arr, order="F").tobytes()
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header + payload


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_t64(path, array, names=None):
    """Write a 2-D or 3-D float array to ``path``."""
    _atomic_write(path, _encode(array, names))


def write_t64_sections(path, arrays):
    """Write several matrices/tensors back to back as consecutive ``.t64`` records.

    ``arrays`` is a sequence of ``(array, names)`` pairs or plain arrays.
    """
    chunks = []
    for item in arrays:
        arr, names = item if isinstance(item, tuple) else (item, None)
        chunks.append(_encode(arr, names))
    _atomic_write(path, b"".join(chunks))


def _read_header(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise T64FormatError(f"bad magic {magic!r}")
    version = fh.read(1)
    if len(version) != 1 or version[0] != VERSION:
        raise T64FormatError(f"unsupported version {version!r}")
    (hlen,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    if header.get("order") not in (2, 3) or len(header.get("dims", [])) != header["order"]:
        raise T64FormatError(f"inconsistent header {header}")
    return header


def read_t64_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_record(fh):
    header = _read_header(fh)
    dims = tuple(int(d) for d in header["dims"])
    n = int(np.prod(dims))
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise T64FormatError(f"payload holds {len(payload) // 8} values, expected {n}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims, order="F").astype(float)
    return arr, header


def read_t64(path, with_header=False):
    """Read a ``.t64`` file into a float64 array of the stored shape."""
    with open(path, "rb") as fh:
        arr, header = _read_record(fh)
        if fh.read(1):
            raise T64FormatError("trailing bytes after payload")
    if with_header:
        return arr, header
    return arr


def read_t64_sections(path):
    """Read every record of a multi-section ``.t64`` file, in order."""
    out = []
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        while fh.tell() < size:
            out.append(_read_record(fh)[0])
    return out


def write_json(path, obj):
    """Deterministic JSON dump (sorted keys, fixed separators, trailing newline)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
