"""Bilinear interpolation kernels (align-corners convention).

Single home for the interpolation math so that network upsampling, grid
resizing and inference-time image resizing all agree bit-for-bit.  Under
align-corners, output sample i on an axis of length ``n_out`` reads input
coordinate ``i * (n_in - 1) / (n_out - 1)``: corner samples coincide.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Dense (n_out, n_in) matrix whose rows hold bilinear read weights.

    Multiplying it against an axis performs an align-corners 1-D resize;
    its transpose is the exact adjoint, which is what backprop needs.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be positive")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        # degenerate axes: every output reads input sample 0 (n_in == 1),
        # or the single output reads input sample 0 (align-corners anchor)
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m.astype(dtype)


def resize_axes(arr: np.ndarray, out_h: int, out_w: int, h_axis: int, w_axis: int) -> np.ndarray:
    """Bilinearly resize two axes of ``arr`` (align-corners), any rank."""
    my = interp_matrix(arr.shape[h_axis], out_h, np.float64)
    mx = interp_matrix(arr.shape[w_axis], out_w, np.float64)
    out = np.moveaxis(arr, h_axis, -1)
    out = np.moveaxis(out @ my.T.astype(out.dtype), -1, h_axis)
    out = np.moveaxis(out, w_axis, -1)
    out = np.moveaxis(out @ mx.T.astype(out.dtype), -1, w_axis)
    return out


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) image with the shared bilinear kernel."""
    if image.ndim not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D image, got rank {image.ndim}")
    return resize_axes(image, out_h, out_w, 0, 1)
