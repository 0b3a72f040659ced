"""Canny edge detection for training targets.

Pipeline: 5x5 Gaussian blur -> Sobel gradients -> non-maximum suppression
along the quantized gradient direction (4 bins) -> double-threshold
hysteresis with 8-connectivity.  Thresholds are ratios of the maximum
gradient magnitude, making targets invariant to global contrast scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError

# below this absolute gradient floor the map is considered featureless
_MAG_FLOOR = 1e-6

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


@dataclass
class CannyParams:
    gaussian_sigma: float = 1.4
    low_ratio: float = 0.1
    high_ratio: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.low_ratio < self.high_ratio <= 1.0):
            raise ContractError(
                f"need 0 < low_ratio < high_ratio <= 1, got {self.low_ratio}/{self.high_ratio}"
            )


def _gaussian_kernel5(sigma: float) -> np.ndarray:
    ax = np.arange(-2, 3, dtype=np.float64)
    g1 = np.exp(-(ax**2) / (2.0 * sigma * sigma))
    k = np.outer(g1, g1)
    return k / k.sum()


def sobel_gradients(gray: np.ndarray, sigma: float = 0.0):
    """Sobel gx, gy and magnitude; optional Gaussian pre-blur (5x5)."""
    img = np.asarray(gray, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"expected grayscale (H,W), got {img.shape}")
    if sigma > 0:
        img = ndimage.convolve(img, _gaussian_kernel5(sigma), mode="reflect")
    gx = ndimage.convolve(img, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(img, _SOBEL_Y, mode="reflect")
    return gx, gy, np.hypot(gx, gy)


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep local maxima along the gradient direction (4-bin quantization).

    The comparison is strict against one neighbor and non-strict against
    the other so that a two-pixel plateau keeps exactly one pixel.
    """
    h, w = mag.shape
    p = np.zeros((h + 2, w + 2), dtype=mag.dtype)
    p[1:-1, 1:-1] = mag

    def shifted(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bin0 = (angle < 22.5) | (angle >= 157.5)
    bin45 = (angle >= 22.5) & (angle < 67.5)
    bin90 = (angle >= 67.5) & (angle < 112.5)
    bin135 = (angle >= 112.5) & (angle < 157.5)

    n1 = np.empty_like(mag)
    n2 = np.empty_like(mag)
    for mask, (d1, d2) in (
        (bin0, ((0, -1), (0, 1))),
        (bin45, ((-1, -1), (1, 1))),
        (bin90, ((-1, 0), (1, 0))),
        (bin135, ((-1, 1), (1, -1))),
    ):
        n1[mask] = shifted(*d1)[mask]
        n2[mask] = shifted(*d2)[mask]
    keep = (mag > n1) & (mag >= n2)
    return np.where(keep, mag, 0.0)


def canny(gray: np.ndarray, params: CannyParams | None = None) -> np.ndarray:
    """Binary {0,1} edge map (uint8) of a grayscale image in [0,1]."""
    params = params or CannyParams()
    img = np.asarray(gray, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"canny expects grayscale (H,W), got {img.shape}")
    h, w = img.shape
    if h < 8 or w < 8:
        raise ContractError(f"canny needs extents >= 8, got {h}x{w}")

    gx, gy, mag = sobel_gradients(img, sigma=params.gaussian_sigma)
    peak = mag.max()
    if peak < _MAG_FLOOR:
        return np.zeros((h, w), dtype=np.uint8)

    nms = _nms(mag, gx, gy)
    low = params.low_ratio * peak
    high = params.high_ratio * peak
    weak = nms >= low
    strong = nms >= high
    if not strong.any():
        return np.zeros((h, w), dtype=np.uint8)

    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep_labels = np.unique(labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    out = np.isin(labels, keep_labels) & weak
    return out.astype(np.uint8)
