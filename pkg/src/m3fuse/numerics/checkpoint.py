"""Flat binary container of named float64 blocks.

Block layout, repeated until EOF (all integers little-endian u32):

    name_len | name (UTF-8) | rank | extents[rank] | payload (f64 LE)

The byte stream is a pure function of the (ordered) block dict, which is
what makes checkpoint files comparable across runs.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np


class CheckpointError(ValueError):
    pass


def save_blocks(path, blocks: Dict[str, np.ndarray]) -> None:
    out = bytearray()
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        out += struct.pack("<I", len(name_b))
        out += name_b
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_blocks(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    blocks: Dict[str, np.ndarray] = {}
    pos = 0
    n = len(raw)
    while pos < n:
        if pos + 4 > n:
            raise CheckpointError("truncated block header")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + name_len + 4 > n:
            raise CheckpointError("truncated block name")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + 4 * rank > n:
            raise CheckpointError(f"truncated extents for block {name!r}")
        extents = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(extents)) if rank else 1
        nbytes = 8 * count
        if pos + nbytes > n:
            raise CheckpointError(f"truncated payload for block {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(extents)
        blocks[name] = arr.astype(np.float64)
        pos += nbytes
    return blocks
