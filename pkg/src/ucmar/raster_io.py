"""Binary raster files.

Layout: 16-byte header (magic ``b"UCMR"``, then little-endian u32 H, u32 W,
u32 dtype tag) followed by the row-major little-endian payload.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInput

MAGIC = b"UCMR"
HEADER = struct.Struct("<4sIII")

DTYPE_FLOAT32 = 1
DTYPE_UINT8 = 2

_TAG_TO_DTYPE = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT8: np.dtype("u1")}


def write_raster(path, array):
    """Write a 2-D float or boolean array. Booleans are stored as u8."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise InvalidInput(f"raster must be 2-D, got shape {array.shape}")
    if array.dtype == bool or array.dtype == np.uint8:
        tag, payload = DTYPE_UINT8, array.astype("u1")
    else:
        tag, payload = DTYPE_FLOAT32, array.astype("<f4")
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, h, w, tag))
        f.write(np.ascontiguousarray(payload).tobytes())


def read_raster(path):
    """Read a raster; u8 rasters come back as ``bool``, float rasters as float32."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise InvalidInput(f"{path}: truncated header")
    magic, h, w, tag = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidInput(f"{path}: bad magic {magic!r}")
    if tag not in _TAG_TO_DTYPE:
        raise InvalidInput(f"{path}: unknown dtype tag {tag}")
    dtype = _TAG_TO_DTYPE[tag]
    expected = h * w * dtype.itemsize
    if len(data) - HEADER.size != expected:
        raise InvalidInput(f"{path}: payload is {len(data) - HEADER.size} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=HEADER.size).reshape(h, w).copy()
    if tag == DTYPE_UINT8:
        return arr.astype(bool)
    return arr.astype(np.float32)
