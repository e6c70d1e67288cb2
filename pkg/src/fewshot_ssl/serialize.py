"""Binary tensor snapshot format shared by checkpoints, packed datasets and
embedding exports.

Layout (all integers little-endian)::

    magic      4 bytes   b"FSLT"
    version    uint32    1
    count      uint64    number of entries
    per entry:
      name_len uint32
      name     name_len bytes, UTF-8
      rank     uint32
      dims     rank x uint64
      data     prod(dims) x float32, row-major

Entries are written in the order given and read back in file order.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"FSLT"
VERSION = 1


class SnapshotError(ValueError):
    """Malformed or incompatible snapshot file."""


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise SnapshotError("not a tensor snapshot (bad magic bytes)")
    if len(view) < 16:
        raise SnapshotError("truncated header")
    version, count = struct.unpack_from("<IQ", view, 4)
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos) if rank else ()
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(view):
                raise SnapshotError(f"entry {name!r} runs past end of file")
            out[name] = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise SnapshotError(f"truncated snapshot: {exc}") from None
    if pos != len(view):
        raise SnapshotError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(entries))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
