"""Dewarped-image post-processing.

Bilateral smoothing removes fold/crumple shading, but too much of it
destroys text.  :func:`adaptive_smooth` budgets the blur by comparing the
variance of the Laplacian (a sharpness proxy) before and after filtering:
if the ratio drops below the retention threshold, the range sigma is
halved and the filter retried; if no attempt fits the budget the original
image is returned unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .imageio import luminance

_LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64)


@dataclass
class PostprocParams:
    spatial_sigma: float = 3.0
    range_sigma: float = 0.1
    retention: float = 0.8  # minimum varLap(after) / varLap(before)
    max_attempts: int = 4

    def __post_init__(self):
        if not (0.0 < self.retention <= 1.0):
            raise ContractError(f"retention must be in (0, 1], got {self.retention}")
        if self.spatial_sigma <= 0 or self.range_sigma <= 0:
            raise ContractError("sigmas must be positive")


def bilateral_filter(image: np.ndarray, spatial_sigma: float,
                     range_sigma: float) -> np.ndarray:
    """Standard bilateral filter; range weights use luminance differences.

    Kernel radius is ceil(2 * spatial_sigma); borders are edge-replicated
    and weights renormalize per pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    gray = np.asarray(luminance(img), dtype=np.float64)
    chans = img if img.ndim == 3 else img[:, :, None]
    r = math.ceil(2.0 * spatial_sigma)
    pad_img = np.pad(chans, ((r, r), (r, r), (0, 0)), mode="edge")
    pad_gray = np.pad(gray, r, mode="edge")
    h, w = gray.shape

    acc = np.zeros_like(chans)
    norm = np.zeros((h, w), dtype=np.float64)
    inv_s2 = 1.0 / (2.0 * spatial_sigma * spatial_sigma)
    inv_r2 = 1.0 / (2.0 * range_sigma * range_sigma)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-(dy * dy + dx * dx) * inv_s2)
            sg = pad_gray[r + dy : r + dy + h, r + dx : r + dx + w]
            wr = np.exp(-((sg - gray) ** 2) * inv_r2)
            wgt = ws * wr
            norm += wgt
            acc += wgt[:, :, None] * pad_img[r + dy : r + dy + h, r + dx : r + dx + w]
    out = acc / norm[:, :, None]
    out = out if img.ndim == 3 else out[:, :, 0]
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype, copy=False)


def variance_of_laplacian(image: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response over the valid interior."""
    gray = np.asarray(luminance(np.asarray(image, dtype=np.float64)))
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ContractError(f"image too small for a 3x3 Laplacian: {gray.shape}")
    resp = ndimage.convolve(gray, _LAPLACIAN, mode="constant")[1:-1, 1:-1]
    return float(resp.var())


def adaptive_smooth(image: np.ndarray, params: PostprocParams | None = None) -> np.ndarray:
    """Bilateral smoothing constrained to retain sharpness.

    A 0/0 variance ratio (constant images) counts as 1, so flat inputs are
    accepted on the first attempt.
    """
    params = params or PostprocParams()
    before = variance_of_laplacian(image)
    sigma_r = params.range_sigma
    for _ in range(params.max_attempts):
        candidate = bilateral_filter(image, params.spatial_sigma, sigma_r)
        after = variance_of_laplacian(candidate)
        ratio = 1.0 if before == 0.0 else after / before
        if ratio >= params.retention:
            return candidate
        sigma_r *= 0.5
    return np.asarray(image)
