"""Matrix validation and the MATX / CSV file formats.

MATX layout (all integers little-endian)::

    0-3    magic b"MATX"
    4      version (1)
    5      dtype code, 1 = float32, 2 = float64
    6-7    reserved, zero
    8-15   rows (uint64)
    16-23  cols (uint64)
    24-    row-major payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MAGIC = b"MATX"
VERSION = 1
_HEADER = struct.Struct("<4sBBHQQ")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

CSV_MAX_ENTRIES = 10**6


def as_matrix(x, dtype=None, name="matrix") -> np.ndarray:
    """Validate ``x`` as a finite 2-D real array.

    float32 input is kept as float32 unless ``dtype`` says otherwise; every
    other real type is promoted to float64.
    """
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must have at least one row and column, got {arr.shape}")
    if np.iscomplexobj(arr) or not (np.issubdtype(arr.dtype, np.number) or arr.dtype == bool):
        raise InvalidInputError(f"{name} must be real-valued, got dtype {arr.dtype}")
    if dtype is None:
        dtype = np.float32 if arr.dtype == np.float32 else np.float64
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def write_matx(path, matrix) -> None:
    m = as_matrix(matrix)
    code = _CODE_FOR[m.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, 0, m.shape[0], m.shape[1])
    payload = np.ascontiguousarray(m, dtype=_DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_matx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated MATX header")
    magic, version, code, reserved, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported MATX version {version}")
    if code not in _DTYPE_CODES:
        raise InvalidInputError(f"{path}: unknown dtype code {code}")
    if reserved != 0:
        raise InvalidInputError(f"{path}: reserved header bytes must be zero")
    dt = _DTYPE_CODES[code]
    expected = rows * cols * dt.itemsize
    if len(raw) - _HEADER.size != expected:
        raise InvalidInputError(
            f"{path}: payload holds {len(raw) - _HEADER.size} bytes, header implies {expected}"
        )
    data = np.frombuffer(raw, dtype=dt, offset=_HEADER.size).reshape(rows, cols)
    return as_matrix(data.astype(dt.newbyteorder("="), copy=True), name=str(path))


def write_csv(path, matrix) -> None:
    m = as_matrix(matrix)
    if m.size > CSV_MAX_ENTRIES:
        raise InvalidInputError(f"CSV output limited to {CSV_MAX_ENTRIES} entries, got {m.size}")
    np.savetxt(path, m, delimiter=",", fmt="%.17g")


def read_csv(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    if data.size > CSV_MAX_ENTRIES:
        raise InvalidInputError(f"{path}: CSV input limited to {CSV_MAX_ENTRIES} entries")
    return as_matrix(data, name=str(path))


def load_matrix(path) -> np.ndarray:
    """Read a matrix, sniffing MATX by its magic bytes and falling back to CSV."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_matx(path)
    return read_csv(path)


def save_matrix(path, matrix) -> None:
    if os.fspath(path).lower().endswith(".csv"):
        write_csv(path, matrix)
    else:
        write_matx(path, matrix)
