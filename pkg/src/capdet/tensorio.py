"""CAPDET-TENSORS v1 binary tensor dump.

Layout: the ASCII line ``CAPDET-TENSORS v1\\n`` followed by records until EOF.
Each record is

    u32 name_len | name (UTF-8) | u32 rank | rank x u64 dims | float32 data

all little-endian, data row-major.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CAPDET-TENSORS v1\n"


class TensorFileError(ValueError):
    pass


def dump_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def load_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if not buf.startswith(MAGIC):
        raise TensorFileError("missing CAPDET-TENSORS v1 header")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise TensorFileError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
            pos += 4 * count
    except struct.error as exc:
        raise TensorFileError(f"truncated record at byte {pos}") from exc
    return out


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return load_tensors(Path(path).read_bytes())


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """sha256 over the canonical dump, in name order."""
    ordered = {k: tensors[k] for k in sorted(tensors)}
    return hashlib.sha256(dump_tensors(ordered)).hexdigest()
