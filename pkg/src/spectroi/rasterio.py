"""SCTR1 raster container: the on-disk format for sinograms, multi-energy
images, density maps and ROI label rasters.

Layout (little-endian):
    magic   5 bytes  b"SCTR1"
    width   u32
    height  u32
    channels u32
    dtype   4 bytes  ascii tag padded with NUL: "f32", "f64", "i32"
    kind    u16 length + UTF-8 string
    meta    u32 length + UTF-8 JSON text
    payload width*height*channels elements, C-order, shape (channels, height, width)
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SCTR1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4")}
_TAGS = {np.dtype("float32"): "f32", np.dtype("float64"): "f64",
         np.dtype("int32"): "i32", np.dtype("int64"): "i32"}


class RasterFormatError(ValueError):
    pass


def write_raster(path, array: np.ndarray, kind: str, metadata: dict | None = None):
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise RasterFormatError("array must be 2-D or (channels, H, W)")
    if arr.dtype not in _TAGS:
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int32)
        else:
            raise RasterFormatError(f"unsupported dtype {arr.dtype}")
    tag = _TAGS[arr.dtype]
    if tag == "i32":
        arr = arr.astype("<i4")
    c, h, w = arr.shape
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    kind_b = kind.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(tag.encode("ascii").ljust(4, b"\0"))
        fh.write(struct.pack("<H", len(kind_b)))
        fh.write(kind_b)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_raster(path):
    """Returns (array (channels, H, W), kind, metadata dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise RasterFormatError(f"{path}: bad magic")
    off = 5
    w, h, c = struct.unpack_from("<III", blob, off)
    off += 12
    tag = blob[off:off + 4].rstrip(b"\0").decode("ascii")
    off += 4
    if tag not in _DTYPES:
        raise RasterFormatError(f"{path}: unknown dtype tag {tag!r}")
    (kl,) = struct.unpack_from("<H", blob, off)
    off += 2
    kind = blob[off:off + kl].decode("utf-8")
    off += kl
    (ml,) = struct.unpack_from("<I", blob, off)
    off += 4
    metadata = json.loads(blob[off:off + ml].decode("utf-8")) if ml else {}
    off += ml
    dt = _DTYPES[tag]
    expected = w * h * c * dt.itemsize
    payload = blob[off:off + expected]
    if len(payload) != expected:
        raise RasterFormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy()
    return arr, kind, metadata
