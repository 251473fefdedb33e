"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"SGRPOCKP"
    8       4     u32 format version (1)
    12      4     u32 number of layer sizes L
    16      32    sha256 digest of the run configuration
    48      8     u64 training step
    56      4*L   u32 layer sizes
    ...     8     u64 parameter count P
    ...     8*P   float64 parameters
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SGRPOCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: np.ndarray
    sizes: tuple[int, ...]
    config_hash: bytes
    step: int


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def write_checkpoint(
    path: str | Path, params: np.ndarray, sizes: Sequence[int], config_hash: bytes, step: int
) -> None:
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    params = np.ascontiguousarray(params, dtype="<f8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(sizes))
    out += config_hash
    out += struct.pack("<Q", step)
    out += struct.pack(f"<{len(sizes)}I", *sizes)
    out += struct.pack("<Q", params.size)
    out += params.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))


def read_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 56 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n_sizes = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config_hash = data[16:48]
    (step,) = struct.unpack_from("<Q", data, 48)
    off = 56
    sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
    off += 4 * n_sizes
    (n_params,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + 8 * n_params:
        raise CheckpointError(f"{path}: truncated or oversized parameter block")
    params = np.frombuffer(data, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    return Checkpoint(params, tuple(sizes), config_hash, step)
