"""Training losses: edge BCE, boundary-weighted grid MSE, combination.

The grid loss is a per-pixel weighted mean squared error whose weight map
peaks on the outermost grid ring and tapers linearly to 1 over ``taper``
pixels, so poor boundary predictions are penalized more.  The edge loss is
plain pixelwise binary cross-entropy between the gate-stream edge
prediction and the Canny target; it reaches only first-stage parameters
because the prediction is computed before the second stage.  The combined
loss is ``grid + lambda * edge`` with lambda 0.9 by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError

PRED_CLAMP = 1e-7
DEFAULT_LAMBDA = 0.9


@dataclass
class BoundaryWeightMask:
    """Weight map W(i,j) = 1 + (omega-1) * max(0, 1 - d/tau), d = Chebyshev
    distance to the nearest border."""

    size: int
    omega: float = 5.0
    taper: float | None = None  # defaults to size / 16

    def __post_init__(self):
        if self.omega < 1.0:
            raise ContractError(f"omega must be >= 1, got {self.omega}")
        if self.taper is None:
            self.taper = self.size / 16.0
        if self.taper <= 0:
            raise ContractError(f"taper must be positive, got {self.taper}")
        idx = np.arange(self.size)
        d1 = np.minimum(idx, self.size - 1 - idx)
        d = np.minimum(d1[:, None], d1[None, :]).astype(np.float64)
        self.weights = (
            1.0 + (self.omega - 1.0) * np.maximum(0.0, 1.0 - d / self.taper)
        ).astype(np.float32)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def edge_loss(edge_pred: Tensor, gt_edges) -> Tensor:
    """Mean binary cross-entropy; predictions clamped away from {0,1}."""
    gt = _as_tensor(gt_edges)
    if edge_pred.shape != gt.shape:
        raise DimensionError(
            f"edge prediction shape {edge_pred.shape} vs target {gt.shape}"
        )
    y = Tensor(gt.data.astype(edge_pred.dtype))
    p = ag.clamp(edge_pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    pos = ag.mul(ag.log(p), y)
    neg = ag.mul(ag.log(ag.sub_from_scalar(1.0, p)), Tensor(1.0 - y.data))
    return ag.mul_scalar(ag.reduce_mean(ag.add(pos, neg)), -1.0)


def grid_loss(grid: Tensor, gt_grid, mask: BoundaryWeightMask) -> Tensor:
    """Mean over batch, channels and pixels of W * (g - g_hat)^2."""
    gt = _as_tensor(gt_grid)
    if grid.shape != gt.shape:
        raise DimensionError(f"grid shape {grid.shape} vs target {gt.shape}")
    if grid.shape[2] != mask.size or grid.shape[3] != mask.size:
        raise DimensionError(
            f"mask size {mask.size} does not match grid spatial {grid.shape[2:]}"
        )
    w = Tensor(mask.weights.astype(grid.dtype).reshape(1, 1, mask.size, mask.size))
    diff = ag.sub(grid, Tensor(gt.data.astype(grid.dtype)))
    return ag.reduce_mean(ag.mul(ag.square(diff), w))


def combined_loss(grid: Tensor, gt_grid, edge_pred: Tensor, gt_edges,
                  mask: BoundaryWeightMask, lam: float = DEFAULT_LAMBDA):
    """grid_loss + lam * edge_loss; returns (total, grid_term, edge_term)."""
    g = grid_loss(grid, gt_grid, mask)
    e = edge_loss(edge_pred, gt_edges)
    total = ag.add(g, ag.mul_scalar(e, lam))
    return total, g, e
