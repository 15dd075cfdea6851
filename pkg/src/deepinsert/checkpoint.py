"""Flat binary checkpoint container: versioned header, JSON meta block,
length-prefixed named tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"DINS"
    u32     format version (currently 1)
    u32     meta length, then that many bytes of UTF-8 JSON
    u32     tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   dtype code (0=float32, 1=float64, 2=int64)
        u8   ndim
        u32* dims
        u64  payload length, then raw C-order little-endian bytes

Round-trips are bit-exact; loaders validate the magic, the version, and
(when a config is supplied) every tensor shape, naming the first mismatch.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from .errors import CheckpointError
from .fileio import atomic_write_bytes

MAGIC = b"DINS"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_container(path: str, meta: dict[str, Any],
                   tensors: dict[str, np.ndarray]) -> None:
    parts: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if le.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_bytes = name.encode()
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", _DTYPE_CODES[le.dtype], le.ndim))
        parts.append(struct.pack(f"<{le.ndim}I", *le.shape))
        payload = le.tobytes(order="C")
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_container(path: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version}, "
            f"expected {FORMAT_VERSION}"
        )
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode())
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        code, ndim = reader.unpack("<BB")
        shape = reader.unpack(f"<{ndim}I")
        (nbytes,) = reader.unpack("<Q")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"tensor {name!r}: payload {nbytes} bytes, expected {expected}"
            )
        arr = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
        tensors[name] = arr
    return meta, tensors


def check_shapes(tensors: dict[str, np.ndarray],
                 expected: dict[str, tuple[int, ...]]) -> None:
    """Validate loaded tensors against expected shapes, naming mismatches."""
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"expected {tuple(shape)}"
            )
