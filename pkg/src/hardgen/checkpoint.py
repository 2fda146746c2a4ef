"""Checkpoint container: named float32 arrays plus a JSON descriptor.

Layout (all integers little-endian):

    magic   8 bytes  b"HGCKPT01"
    u32     length of descriptor JSON
    bytes   descriptor JSON (UTF-8, sorted keys)
    then one record per array, sorted by name:
        u16   name length, then name UTF-8
        u8    ndim, then ndim x u32 dims
        f32   row-major data

Arrays are stored as little-endian float32 regardless of in-memory dtype,
so a checkpoint written anywhere loads bit-identically everywhere.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"HGCKPT01"


def save_checkpoint(path: str | Path, descriptor: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    desc_bytes = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(desc_bytes)))
        fh.write(desc_bytes)
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f4")
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise IntegrityError(f"not a checkpoint file (bad magic): {path}")
    try:
        pos = 8
        (desc_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        descriptor = json.loads(data[pos : pos + desc_len].decode("utf-8"))
        pos += desc_len
        arrays: dict[str, np.ndarray] = {}
        while pos < len(data):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            arrays[name] = arr.reshape(shape).copy()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise IntegrityError(f"corrupt checkpoint {path}: {exc}") from exc
    if pos != len(data):
        raise IntegrityError(f"corrupt checkpoint {path}: trailing bytes")
    return descriptor, arrays
