"""Dense backward maps and bilinear unwarping.

A :class:`DenseGrid` stores, for every pixel of the dewarped canvas, the
normalized source coordinate to read from the warped image.  Channel 0 is
x (column), channel 1 is y (row); (-1,-1) addresses the top-left source
pixel and (+1,+1) the bottom-right (align-corners).  Grids regressed by
the model live in (-1,1); analytic ground-truth grids may poke slightly
outside, which sampling handles by clamping to the border.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .interp import resize_axes

_DGRID_MAGIC = b"DGRD"
_DGRID_VERSION = 1

# integer-aligned reads must stay bit-exact; coordinates this close to a
# pixel center are snapped onto it
_SNAP_EPS = 1e-6


@dataclass
class DenseGrid:
    """Per-pixel backward map, shape (2, height, width), float32."""

    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map)
        if m.ndim != 3 or m.shape[0] != 2:
            raise ContractError(f"grid map must be (2, H, W), got {m.shape}")
        self.map = m.astype(np.float32, copy=False)

    @property
    def height(self) -> int:
        return self.map.shape[1]

    @property
    def width(self) -> int:
        return self.map.shape[2]


def identity_grid(height: int, width: int) -> DenseGrid:
    """Grid whose value at (i, j) is (2j/(W-1)-1, 2i/(H-1)-1)."""
    if height < 2 or width < 2:
        raise ContractError(f"identity grid needs extents >= 2, got {height}x{width}")
    gx = 2.0 * np.arange(width, dtype=np.float64) / (width - 1) - 1.0
    gy = 2.0 * np.arange(height, dtype=np.float64) / (height - 1) - 1.0
    m = np.empty((2, height, width), dtype=np.float32)
    m[0] = gx[None, :]
    m[1] = gy[:, None]
    return DenseGrid(m)


def _snap(coords: np.ndarray) -> np.ndarray:
    r = np.rint(coords)
    return np.where(np.abs(coords - r) < _SNAP_EPS, r, coords)


def bilinear_sample(image: np.ndarray, grid: DenseGrid) -> np.ndarray:
    """Read ``image`` at the grid's denormalized positions.

    Out-of-range reads clamp to the border pixels.  Output has the grid's
    spatial extent and the image's channel count.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    elif img.ndim == 3:
        squeeze = False
    else:
        raise ContractError(f"image must be (H, W) or (H, W, C), got {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ContractError("image must be non-empty")
    if not np.all(np.isfinite(grid.map)):
        raise ContractError("grid contains non-finite values")

    gx = grid.map[0].astype(np.float64)
    gy = grid.map[1].astype(np.float64)
    x = _snap((gx + 1.0) * 0.5 * (w - 1))
    y = _snap((gy + 1.0) * 0.5 * (h - 1))
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)

    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]

    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = (top * (1.0 - fy) + bot * fy).astype(img.dtype, copy=False)
    return out[:, :, 0] if squeeze else out


def upsample_grid(grid: DenseGrid, target_h: int, target_w: int) -> DenseGrid:
    """Bilinearly resize each grid channel to the target extent."""
    if target_h < 2 or target_w < 2:
        raise ContractError(f"target extents must be >= 2, got {target_h}x{target_w}")
    resized = resize_axes(grid.map.astype(np.float64), target_h, target_w, 1, 2)
    return DenseGrid(resized.astype(np.float32))


def unwarp(original_image: np.ndarray, grid: DenseGrid) -> np.ndarray:
    """Dewarp at the original resolution: upsample the grid, then sample."""
    h, w = np.asarray(original_image).shape[:2]
    full = upsample_grid(grid, h, w) if (grid.height, grid.width) != (h, w) else grid
    return bilinear_sample(original_image, full)


# ---------------------------------------------------------------------------
# .dgrid file format: magic "DGRD" | version u32 LE | height u32 | width u32
# | channel 0 row-major f32 LE | channel 1.


def save_grid(grid: DenseGrid, path: str):
    payload = struct.pack("<4sIII", _DGRID_MAGIC, _DGRID_VERSION, grid.height, grid.width)
    body = np.ascontiguousarray(grid.map, dtype="<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.write(body)
    os.replace(tmp, path)


def load_grid(path: str) -> DenseGrid:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError(f"dgrid file too short ({len(blob)} bytes)", offset=len(blob))
    magic, version, height, width = struct.unpack_from("<4sIII", blob, 0)
    if magic != _DGRID_MAGIC:
        raise FormatError(f"bad dgrid magic {magic!r}", offset=0)
    if version != _DGRID_VERSION:
        raise FormatError(f"unsupported dgrid version {version}", offset=4)
    expected = 16 + 2 * height * width * 4
    if len(blob) != expected:
        raise FormatError(
            f"dgrid payload truncated: expected {expected} bytes, got {len(blob)}",
            offset=min(len(blob), expected),
        )
    m = np.frombuffer(blob, dtype="<f4", count=2 * height * width, offset=16)
    return DenseGrid(m.reshape(2, height, width).copy())
