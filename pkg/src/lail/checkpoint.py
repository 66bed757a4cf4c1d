"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"LAILCKPT"
    version   u32
    count     u32       number of parameter records
    record    repeated:
        name_len  u32
        name      utf-8 bytes
        rank      u32
        dims      rank x u64
        payload   prod(dims) x f64 (little-endian, row-major)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LAILCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a LAIL checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        state[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last record")
    return state


def save(path, state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def prefixed(state: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def strip_prefix(state: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in state.items() if k.startswith(head)}
