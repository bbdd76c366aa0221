"""Binary container for named float64 arrays, with a trailing checksum.

Layout (all integers little-endian):

    magic  7 bytes  b"PERLW1\\0"
    count  u32      number of arrays
    per array:
        name_len u32, name UTF-8 bytes
        rank     u8
        dims     rank x u32
        values   product(dims) x f64, row-major
    checksum u64    FNV-1a over every preceding byte, magic included

Arrays round-trip bit-exactly; any flipped byte is caught by the checksum.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .rng import fnv1a64

MAGIC = b"PERLW1\x00"


class ContainerError(ValueError):
    """Malformed or corrupted array container."""


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64, order="C")  # keeps rank-0 intact
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    body = b"".join(chunks)
    return body + struct.pack("<Q", fnv1a64(body))


def unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 4 + 8:
        raise ContainerError("container truncated")
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"bad magic {blob[:len(MAGIC)]!r}")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    actual = fnv1a64(body)
    if stored != actual:
        raise ContainerError(f"checksum mismatch: stored {stored:#x}, computed {actual:#x}")

    offset = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", body, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", body, offset)
        offset += 4 * rank
        n = 1
        for d in dims:
            n *= d
        values = np.frombuffer(body, dtype="<f8", count=n, offset=offset).copy()
        offset += 8 * n
        arrays[name] = values.reshape(dims)
    if offset != len(body):
        raise ContainerError(f"{len(body) - offset} trailing bytes after last array")
    return arrays


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_arrays(arrays))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return unpack_arrays(Path(path).read_bytes())
