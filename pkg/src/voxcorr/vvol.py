"""Bit-exact container for volumes and displacement fields.

Layout (little-endian): magic "VVOL" | u32 version=1 | u32 dtype (0=float32,
1=uint8) | u32 channels | u32 nx | u32 ny | u32 nz | f32 vx | f32 vy | f32 vz
(micrometers) | u32 meta_len | meta_len bytes UTF-8 JSON | payload of
`channels` planes, each nz*ny*nx values indexed ((z*ny)+y)*nx + x.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import BinaryVolume, DisplacementField, ScalarVolume

MAGIC = b"VVOL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
_HEADER = struct.Struct("<4sII IIII fff I")


class VvolError(IOError):
    pass


class VvolBadMagic(VvolError):
    pass


class VvolUnsupportedVersion(VvolError):
    pass


class VvolUnsupportedDtype(VvolError):
    pass


class VvolTruncated(VvolError):
    pass


def write_raw(path, data: np.ndarray, voxel_size=(1.0, 1.0, 1.0), meta: dict | None = None) -> None:
    """Write a [c, nz, ny, nx] (or [nz, ny, nx]) array; dtype must be float32 or uint8."""
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise VvolError(f"expected 3D or 4D array, got shape {data.shape}")
    dt = np.dtype(data.dtype)
    if dt not in _DTYPE_CODES:
        raise VvolUnsupportedDtype(f"dtype {dt} not storable; cast to float32 or uint8 first")
    c, nz, ny, nx = data.shape
    vx, vy, vz = (float(v) for v in voxel_size)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dt], c, nx, ny, nz, vx, vy, vz, len(meta_bytes))
    payload = np.ascontiguousarray(data, dtype=dt.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + meta_bytes + payload)


def read_raw(path) -> tuple[np.ndarray, tuple[float, float, float], dict]:
    """Read back (data[c, nz, ny, nx], voxel_size, meta)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise VvolTruncated(f"{path}: file shorter than header ({len(blob)} bytes)")
    magic, version, dtype_code, c, nx, ny, nz, vx, vy, vz, meta_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise VvolBadMagic(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VvolUnsupportedVersion(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPES:
        raise VvolUnsupportedDtype(f"{path}: unknown dtype code {dtype_code}")
    dt = _DTYPES[dtype_code]
    off = _HEADER.size
    if len(blob) < off + meta_len:
        raise VvolTruncated(f"{path}: truncated metadata")
    meta = json.loads(blob[off : off + meta_len].decode("utf-8")) if meta_len else {}
    off += meta_len
    count = c * nz * ny * nx
    if len(blob) - off < count * dt.itemsize:
        raise VvolTruncated(
            f"{path}: payload has {len(blob) - off} bytes, expected {count * dt.itemsize}"
        )
    data = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(c, nz, ny, nx)
    return data.copy(), (vx, vy, vz), meta


def vvol_write(path, obj, meta: dict | None = None) -> None:
    """Write a ScalarVolume (float32), BinaryVolume (uint8) or DisplacementField."""
    if isinstance(obj, ScalarVolume):
        write_raw(path, obj.data.astype(np.float32, copy=False), obj.voxel_size, meta)
    elif isinstance(obj, BinaryVolume):
        write_raw(path, obj.mask.astype(np.uint8), obj.voxel_size, meta)
    elif isinstance(obj, DisplacementField):
        write_raw(path, obj.data.astype(np.float32, copy=False), obj.voxel_size, meta)
    else:
        raise VvolError(f"cannot serialize object of type {type(obj).__name__}")


def vvol_read(path):
    """Read a file back into the matching domain type (by dtype and channels)."""
    data, voxel_size, _meta = read_raw(path)
    c = data.shape[0]
    if c == 1 and data.dtype == np.uint8:
        return BinaryVolume(data[0] != 0, voxel_size)
    if c == 1:
        return ScalarVolume(data[0], voxel_size)
    if c == 3 and data.dtype == np.float32:
        return DisplacementField(data, voxel_size)
    raise VvolError(f"no domain type for {c} channels of {data.dtype}")
