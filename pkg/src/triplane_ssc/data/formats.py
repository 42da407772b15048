"""Binary grid and image formats.

``.vg3d``: 32-byte header (magic ``VG3D``, version u16, dtype code u8, class
count u16, extents 3 x u32, zero padding) then the little-endian payload in
x-major (C) order. ``.f32``: height and width as u32, then row-major f32.
``.rgb8``: height and width as u32, then interleaved u8 RGB.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VG3D_MAGIC = b"VG3D"
VG3D_VERSION = 1
VG3D_HEADER = struct.Struct("<4sHBH3I11x")
DTYPE_CODES = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}
_IMG_HEADER = struct.Struct("<II")


class FormatError(ValueError):
    pass


def encode_voxel_grid(grid, num_classes=0):
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"voxel grid must be 3-D, got shape {grid.shape}")
    if grid.dtype == np.bool_:
        grid = grid.astype(np.uint8)
    dt = grid.dtype.newbyteorder("<") if grid.dtype.itemsize > 1 else grid.dtype
    if dt not in _CODE_OF:
        raise ValueError(f"unsupported voxel dtype {grid.dtype}")
    header = VG3D_HEADER.pack(VG3D_MAGIC, VG3D_VERSION, _CODE_OF[dt], int(num_classes), *grid.shape)
    return header + np.ascontiguousarray(grid, dtype=dt).tobytes()


def decode_voxel_grid(buf):
    """Returns ``(grid, num_classes)``."""
    if len(buf) < VG3D_HEADER.size:
        raise FormatError(f"truncated vg3d header: {len(buf)} bytes, need {VG3D_HEADER.size} at offset 0")
    magic, version, code, n_classes, ex, ey, ez = VG3D_HEADER.unpack_from(buf, 0)
    if magic != VG3D_MAGIC:
        raise FormatError(f"bad vg3d magic {magic!r} at offset 0")
    if version != VG3D_VERSION:
        raise FormatError(f"unsupported vg3d version {version} at offset 4")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown vg3d dtype code {code} at offset 6")
    dt = DTYPE_CODES[code]
    need = ex * ey * ez * dt.itemsize
    have = len(buf) - VG3D_HEADER.size
    if have < need:
        raise FormatError(f"truncated vg3d payload: {have} of {need} bytes at offset {VG3D_HEADER.size}")
    if have > need:
        raise FormatError(f"{have - need} trailing bytes at offset {VG3D_HEADER.size + need}")
    grid = np.frombuffer(buf, dtype=dt, offset=VG3D_HEADER.size).reshape(ex, ey, ez).copy()
    return grid, n_classes


def write_voxel_grid(grid, path, num_classes=0):
    Path(path).write_bytes(encode_voxel_grid(grid, num_classes))


def read_voxel_grid(path):
    return decode_voxel_grid(Path(path).read_bytes())


def _decode_image(buf, dtype, channels, kind):
    if len(buf) < _IMG_HEADER.size:
        raise FormatError(f"truncated {kind} header at offset 0")
    h, w = _IMG_HEADER.unpack_from(buf, 0)
    need = h * w * channels * dtype.itemsize
    have = len(buf) - _IMG_HEADER.size
    if have != need:
        raise FormatError(f"{kind} payload is {have} bytes, expected {need} at offset {_IMG_HEADER.size}")
    arr = np.frombuffer(buf, dtype=dtype, offset=_IMG_HEADER.size).copy()
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def write_depth(depth, path):
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("depth must be [H, W]")
    Path(path).write_bytes(_IMG_HEADER.pack(*depth.shape) + np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path):
    return _decode_image(Path(path).read_bytes(), np.dtype("<f4"), 1, "f32")


def write_rgb(rgb, path):
    """``rgb [3, H, W]`` floats in [0, 1], rounded to 8 bits."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError("rgb must be [3, H, W]")
    u8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(_IMG_HEADER.pack(*u8.shape[:2]) + np.ascontiguousarray(u8).tobytes())


def read_rgb(path):
    hwc = _decode_image(Path(path).read_bytes(), np.dtype("u1"), 3, "rgb8")
    return hwc.transpose(2, 0, 1).astype(np.float64) / 255.0
