"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic     8 bytes  b"IUSFCKPT"
    version   u32
    header    u32 length + UTF-8 JSON (configs, iteration, seed, optimizer scalars)
    count     u32
    records   count x { u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
                        float64 little-endian data }
    crc32     u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"IUSFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8").copy(order="C")  # keeps 0-d shapes
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file is corrupt)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = take("<I")
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after records")
    return header, tensors
