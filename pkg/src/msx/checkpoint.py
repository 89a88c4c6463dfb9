"""Binary named-tensor archive for model persistence.

Layout (little-endian): magic "MSXC1", u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 rank, u32 dims, raw float32 values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .data import DataError

MAGIC = b"MSXC1"


class CheckpointError(DataError):
    pass


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    """Write atomically (temp file + rename); values stored as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype=np.float32)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: unknown magic {raw[:5]!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
        state[name] = arr
    return state
