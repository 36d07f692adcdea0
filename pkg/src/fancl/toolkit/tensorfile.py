"""FTNS single-tensor files and the FTCK named-section container.

FTNS layout (all little-endian)::

    b"FTNS" | version u8 (=1) | dtype u8 | ndim u8 | dims u32 * ndim | payload

dtype codes: 0 float32, 1 float64, 2 int32.

FTCK layout::

    b"FTCK" | version u8 (=1) | count u32 |
    count * (name_len u16 | utf-8 name | blob_len u64 | FTNS blob)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fancl.errors import FormatError, NumericError

MAGIC = b"FTNS"
CONTAINER_MAGIC = b"FTCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int32): 2}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in CODES:
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            arr = arr.astype(np.int32)
        else:
            raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NumericError("refusing to serialize a tensor with non-finite values")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    code = CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, base: int = 0) -> tuple[np.ndarray, int]:
    """Parse one FTNS tensor at ``base``; returns (array, bytes consumed)."""
    if len(buf) - base < 7:
        raise FormatError("truncated header", base)
    if buf[base : base + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[base:base + 4])!r}", base)
    version, code, ndim = struct.unpack_from("<BBB", buf, base + 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", base + 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", base + 5)
    dims_at = base + 7
    if len(buf) < dims_at + 4 * ndim:
        raise FormatError("truncated dims", dims_at)
    dims = struct.unpack_from(f"<{ndim}I", buf, dims_at)
    payload_at = dims_at + 4 * ndim
    dtype = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < payload_at + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - payload_at}", payload_at)
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=payload_at)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), payload_at + nbytes - base


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, used = decode_tensor(buf)
    if used != len(buf):
        raise FormatError(f"{len(buf) - used} trailing bytes", used)
    return arr


def write_container(path, sections: dict) -> None:
    parts = [CONTAINER_MAGIC, struct.pack("<BI", VERSION, len(sections))]
    for name, value in sections.items():
        raw = name.encode("utf-8")
        blob = encode_tensor(value)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CONTAINER_MAGIC:
        raise FormatError(f"bad container magic {buf[:4]!r}", 0)
    if len(buf) < 9:
        raise FormatError("truncated container header", 4)
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated section header", pos)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if len(buf) < pos + 8:
            raise FormatError("truncated section header", pos)
        (blob_len,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if len(buf) < pos + blob_len:
            raise FormatError(f"truncated section {name!r}", pos)
        arr, used = decode_tensor(buf[pos : pos + blob_len])
        if used != blob_len:
            raise FormatError(f"section {name!r} length mismatch", pos)
        out[name] = arr
        pos += blob_len
    return out
