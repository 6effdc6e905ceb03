"""Flat binary tensor dumps and the checkpoint manifest convention.

File layout: 8-byte magic ``STPTNS01``, u32 rank, one u32 extent per axis
(little-endian), then float64 payload in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"STPTNS01"


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    payload = MAGIC + struct.pack("<I", arr.ndim)
    payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, payload + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a tensor dump")
    rank, = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    off = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    return arr.reshape(shape).copy()


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_manifest(path, entries: dict[str, str]) -> None:
    lines = [f"{name} {fname}" for name, fname in entries.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        name, fname = line.split(" ", 1)
        entries[name] = fname
    return entries
