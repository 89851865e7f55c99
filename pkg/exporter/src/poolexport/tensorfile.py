"""Minimal writer/reader for the portable tensor container.

Layout: magic ``SAFT``, u16 version (1), u8 dtype code (1 = float32,
2 = float64), u8 rank, rank u64 dims, then the row-major little-endian
payload. Kept dependency-free on the consuming library so this package
speaks only the on-disk format.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SAFT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {"float32": 1, "float64": 2}


def write_tensor(path, t: np.ndarray) -> None:
    t = np.ascontiguousarray(t)
    if t.ndim < 1:
        t = t.reshape(1)
    code = CODES.get(t.dtype.name)
    if code is None:
        raise ValueError(f"unsupported dtype {t.dtype}; use float32/float64")
    header = MAGIC + struct.pack("<HBB", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(t.astype(DTYPES[code], copy=False).tobytes())
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, code, rank = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION or code not in DTYPES:
        raise ValueError(f"{path}: unsupported version/dtype {version}/{code}")
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    dtype = DTYPES[code]
    arr = np.frombuffer(blob, dtype=dtype, offset=8 + 8 * rank).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)
