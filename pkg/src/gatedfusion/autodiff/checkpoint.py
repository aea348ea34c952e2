"""Flat binary serialization of named parameter arrays.

Layout (all integers little-endian):
  magic ``ARGT`` | version u32 | records...
  record: name_len u32 | name UTF-8 | rank u64 | dims u64 x rank | values f64
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ARGT"
VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or has the wrong version."""


def save_arrays(path, arrays: dict[str, np.ndarray], *, extra: dict | None = None) -> None:
    """Write name -> array mappings in checkpoint order (insertion order)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    items = dict(arrays)
    if extra:
        items.update(extra)
    for name, arr in items.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as an ordered name -> float64 array mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    n = len(raw)
    while pos < n:
        if pos + 4 > n:
            raise CheckpointError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + name_len > n:
            raise CheckpointError(f"{path}: truncated parameter name")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 8 > n:
            raise CheckpointError(f"{path}: truncated rank for {name!r}")
        (rank,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if pos + 8 * rank > n:
            raise CheckpointError(f"{path}: truncated shape for {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 8 * count
        if pos + nbytes > n:
            raise CheckpointError(f"{path}: truncated values for {name!r}")
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += nbytes
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter name {name!r}")
        out[name] = values.reshape([int(d) for d in shape]).astype(np.float64)
    return out


def save_parameters(path, params) -> None:
    """Serialize Parameter objects; every parameter must carry a unique name."""
    arrays: dict[str, np.ndarray] = {}
    for p in params:
        if not p.name:
            raise CheckpointError("cannot checkpoint an unnamed parameter")
        if p.name in arrays:
            raise CheckpointError(f"duplicate parameter name {p.name!r}")
        arrays[p.name] = p.value
    save_arrays(path, arrays)


def load_parameters(path, params, *, strict: bool = True) -> None:
    """Restore Parameter values in place from a checkpoint."""
    arrays = load_arrays(path)
    for p in params:
        if p.name not in arrays:
            if strict:
                raise CheckpointError(f"{path}: missing parameter {p.name!r}")
            continue
        stored = arrays[p.name]
        if stored.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {p.name!r}: "
                f"checkpoint {stored.shape}, model {p.value.shape}"
            )
        p.value[...] = stored
