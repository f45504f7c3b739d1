"""Little-endian float32 row files.

A file is a concatenation of records. Each record is a 12-byte header of
three little-endian int32 values ``(tensor_id, rows, cols)`` followed by
``rows * cols`` little-endian float32 values in row-major order. Callers keep
the record offsets (for instance in a JSON manifest) to seek straight to a
tensor or to a single row of it.
"""

from __future__ import annotations

import os
import struct

import numpy as np

HEADER = struct.Struct("<iii")
ROW_DTYPE = np.dtype("<f4")


class WeightFileError(IOError):
    pass


def write_records(path, tensors) -> dict[int, int]:
    """Write ``(tensor_id, 2-D array)`` pairs; return ``{tensor_id: byte offset}``."""
    offsets = {}
    with open(path, "wb") as f:
        for tid, arr in tensors:
            arr = np.asarray(arr)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise ValueError(f"record {tid} must be 1-D or 2-D, got shape {arr.shape}")
            offsets[int(tid)] = f.tell()
            f.write(HEADER.pack(int(tid), arr.shape[0], arr.shape[1]))
            f.write(np.ascontiguousarray(arr, dtype=ROW_DTYPE).tobytes())
    return offsets


def scan_offsets(path) -> dict[int, int]:
    """Rebuild the offset index by walking the record headers."""
    offsets = {}
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        pos = 0
        while pos < size:
            raw = f.read(HEADER.size)
            if len(raw) != HEADER.size:
                raise WeightFileError(f"{path}: truncated header at byte {pos}")
            tid, rows, cols = HEADER.unpack(raw)
            offsets[tid] = pos
            pos += HEADER.size + rows * cols * ROW_DTYPE.itemsize
            f.seek(pos)
    return offsets


def read_header(f, offset: int) -> tuple[int, int, int]:
    f.seek(offset)
    raw = f.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise WeightFileError(f"truncated header at byte {offset}")
    return HEADER.unpack(raw)


def read_record(path, offset: int, expect_id: int | None = None) -> np.ndarray:
    with open(path, "rb") as f:
        tid, rows, cols = read_header(f, offset)
        if expect_id is not None and tid != expect_id:
            raise WeightFileError(f"{path}: expected record {expect_id} at {offset}, found {tid}")
        buf = f.read(rows * cols * ROW_DTYPE.itemsize)
    if len(buf) != rows * cols * ROW_DTYPE.itemsize:
        raise WeightFileError(f"{path}: truncated payload for record {tid}")
    return np.frombuffer(buf, dtype=ROW_DTYPE).reshape(rows, cols).astype(np.float32)


def read_rows(path, offset: int, rows_idx, expect_id: int | None = None) -> np.ndarray:
    """Read selected rows of one record without loading the rest of it."""
    rows_idx = [int(r) for r in rows_idx]
    with open(path, "rb") as f:
        tid, rows, cols = read_header(f, offset)
        if expect_id is not None and tid != expect_id:
            raise WeightFileError(f"{path}: expected record {expect_id} at {offset}, found {tid}")
        out = np.empty((len(rows_idx), cols), dtype=np.float32)
        row_bytes = cols * ROW_DTYPE.itemsize
        for i, r in enumerate(rows_idx):
            if not 0 <= r < rows:
                raise IndexError(f"row {r} out of range for record {tid} with {rows} rows")
            f.seek(offset + HEADER.size + r * row_bytes)
            buf = f.read(row_bytes)
            if len(buf) != row_bytes:
                raise WeightFileError(f"{path}: truncated row {r} of record {tid}")
            out[i] = np.frombuffer(buf, dtype=ROW_DTYPE)
    return out
