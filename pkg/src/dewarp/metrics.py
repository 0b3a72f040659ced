"""Image-quality metrics and the benchmark evaluation protocol.

SSIM/MS-SSIM use the standard 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, dynamic range 1.0 and the usual five-scale weights renormalized
to sum to one.  Local distortion (LD) is the mean magnitude, in pixels,
of a dense flow registering the rectified image onto the ground-truth
scan; the flow comes from a deterministic coarse-to-fine block matcher
(4-level pyramid, 16px patches, +-8px search per level, SAD cost), so LD
values are internally comparable rather than comparable to SIFT-flow
numbers.

The evaluation protocol computes SSIM at original resolution and MS-SSIM
and LD after rescaling both images to approximately 598,400 square pixels
(aspect preserved, extents rounded to even).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError
from .gridsample import DenseGrid
from .imageio import luminance
from .interp import resize_axes, resize_image

PROTOCOL_AREA = 598_400

_MS_WEIGHTS_RAW = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


@dataclass
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    ms_weights: np.ndarray = field(
        default_factory=lambda: _MS_WEIGHTS_RAW / _MS_WEIGHTS_RAW.sum()
    )


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = ndimage.correlate1d(img, win, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, win, axis=1, mode="nearest")
    return out[r:-r, r:-r]


def _ssim_maps(a: np.ndarray, b: np.ndarray, params: SsimParams):
    win = _gaussian_window(params.window_size, params.window_sigma)
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum * cs, cs


def _check_pair(a, b, min_extent: int, what: str):
    a = np.asarray(luminance(np.asarray(a, dtype=np.float64)))
    b = np.asarray(luminance(np.asarray(b, dtype=np.float64)))
    if a.shape != b.shape:
        raise DimensionError(f"{what}: image shapes differ, {a.shape} vs {b.shape}")
    if min(a.shape) < min_extent:
        raise ContractError(
            f"{what}: minimum extent is {min_extent}px, got {a.shape}"
        )
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Mean local SSIM over the valid window positions."""
    params = params or SsimParams()
    a, b = _check_pair(a, b, params.window_size, "ssim")
    smap, _ = _ssim_maps(a, b, params)
    return float(smap.mean())


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    return img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def ms_ssim(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None,
            return_scales: bool = False):
    """Five-scale structural similarity product.

    Contrast-structure terms enter at every scale, the luminance term only
    at the coarsest; exponents are the (renormalized) standard weights.
    """
    params = params or SsimParams()
    scales = len(params.ms_weights)
    min_extent = params.window_size * 2 ** (scales - 1)
    a, b = _check_pair(a, b, min_extent, "ms_ssim")
    cs_vals, ssim_vals = [], []
    ca, cb = a, b
    for level in range(scales):
        smap, cs_map = _ssim_maps(ca, cb, params)
        ssim_vals.append(float(smap.mean()))
        cs_vals.append(float(cs_map.mean()))
        if level < scales - 1:
            ca, cb = _avg_pool2(ca), _avg_pool2(cb)
    value = 1.0
    for level in range(scales - 1):
        value *= max(cs_vals[level], 0.0) ** params.ms_weights[level]
    value *= max(ssim_vals[-1], 0.0) ** params.ms_weights[-1]
    if return_scales:
        return float(value), ssim_vals
    return float(value)


# ---------------------------------------------------------------------------
# Local distortion via coarse-to-fine block matching

_LD_LEVELS = 4
_LD_PATCH = 16
_LD_RADIUS = 8
_LD_VAR_FLOOR = 1e-6


def _shift_edge(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape
    p = np.pad(img, _LD_RADIUS, mode="edge")
    return p[_LD_RADIUS + dy : _LD_RADIUS + dy + h, _LD_RADIUS + dx : _LD_RADIUS + dx + w]


def _remap_pixels(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = img.shape
    gx = (np.arange(w)[None, :] + flow[0]) / max(w - 1, 1) * 2.0 - 1.0
    gy = (np.arange(h)[:, None] + flow[1]) / max(h - 1, 1) * 2.0 - 1.0
    grid = DenseGrid(np.stack([gx, gy]).astype(np.float32))
    from .gridsample import bilinear_sample

    return bilinear_sample(img.astype(np.float64), grid)


def _match_level(a: np.ndarray, b: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Refine flow by an exhaustive +-radius SAD search around it."""
    comp = _remap_pixels(b, flow)
    shifts = sorted(
        ((dy, dx) for dy in range(-_LD_RADIUS, _LD_RADIUS + 1)
         for dx in range(-_LD_RADIUS, _LD_RADIUS + 1)),
        key=lambda s: (s[0] * s[0] + s[1] * s[1], s[0], s[1]),
    )
    best_cost = np.full(a.shape, np.inf)
    best_dy = np.zeros(a.shape, dtype=np.float64)
    best_dx = np.zeros(a.shape, dtype=np.float64)
    for dy, dx in shifts:
        diff = np.abs(a - _shift_edge(comp, dy, dx))
        cost = ndimage.uniform_filter(diff, size=_LD_PATCH, mode="nearest")
        better = cost < best_cost - 1e-12
        best_cost = np.where(better, cost, best_cost)
        best_dy = np.where(better, dy, best_dy)
        best_dx = np.where(better, dx, best_dx)
    return np.stack([flow[0] + best_dx, flow[1] + best_dy])


def local_distortion(rectified: np.ndarray, ground_truth: np.ndarray) -> float:
    """Mean L2 block-matching flow magnitude in pixels."""
    a = np.asarray(luminance(np.asarray(rectified, dtype=np.float64)))
    b = np.asarray(luminance(np.asarray(ground_truth, dtype=np.float64)))
    if a.shape != b.shape:
        raise DimensionError(f"local_distortion: shapes differ, {a.shape} vs {b.shape}")

    pyr_a, pyr_b = [a], [b]
    for _ in range(_LD_LEVELS - 1):
        if min(pyr_a[-1].shape) < 2 * _LD_PATCH:
            break
        pyr_a.append(_avg_pool2(pyr_a[-1]))
        pyr_b.append(_avg_pool2(pyr_b[-1]))

    flow = np.zeros((2,) + pyr_a[-1].shape)
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[1:] != la.shape:
            flow = resize_axes(flow, la.shape[0], la.shape[1], 1, 2) * 2.0
        flow = _match_level(la, lb, flow)

    mean_sq = ndimage.uniform_filter(a * a, size=_LD_PATCH, mode="nearest")
    mean_ = ndimage.uniform_filter(a, size=_LD_PATCH, mode="nearest")
    flat = (mean_sq - mean_ * mean_) < _LD_VAR_FLOOR
    mag = np.hypot(flow[0], flow[1])
    mag[flat] = 0.0
    return float(mag.mean())


# ---------------------------------------------------------------------------
# Evaluation protocol


def protocol_extent(h: int, w: int, area: int = PROTOCOL_AREA) -> tuple[int, int]:
    """Aspect-preserving extents with product ~ area, rounded to even."""
    scale = np.sqrt(area / (h * w))
    he = max(2, int(round(h * scale / 2.0)) * 2)
    we = max(2, int(round(w * scale / 2.0)) * 2)
    return he, we


@dataclass
class EvalItem:
    name: str
    ssim: float | None = None
    ms_ssim: float | None = None
    ld: float | None = None
    error: str | None = None


@dataclass
class EvalReport:
    items: list
    mean_ssim: float
    mean_ms_ssim: float
    mean_ld: float
    protocol_note: str


def evaluate(pairs, names=None, params: SsimParams | None = None) -> EvalReport:
    """Score (rectified, ground-truth scan) pairs under the fixed protocol.

    SSIM runs at the scan's original resolution; MS-SSIM and LD run after
    the fixed-area rescale.  Rectified images whose extent differs from
    the scan are first resized to match.  Failing items are recorded and
    excluded from the aggregates.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluate needs at least one image pair")
    names = names or [f"pair{i:03d}" for i in range(len(pairs))]
    items = []
    for name, (rect, scan) in zip(names, pairs):
        item = EvalItem(name=name)
        try:
            scan = np.asarray(scan, dtype=np.float64)
            rect = np.asarray(rect, dtype=np.float64)
            if rect.shape[:2] != scan.shape[:2]:
                rect = resize_image(rect, scan.shape[0], scan.shape[1])
            item.ssim = ssim(rect, scan, params)
            he, we = protocol_extent(scan.shape[0], scan.shape[1])
            rect_p = resize_image(rect, he, we)
            scan_p = resize_image(scan, he, we)
            item.ms_ssim = ms_ssim(rect_p, scan_p, params)
            item.ld = local_distortion(rect_p, scan_p)
        except Exception as exc:  # recorded per item, excluded from aggregates
            item.error = f"{type(exc).__name__}: {exc}"
        items.append(item)
    ok = [it for it in items if it.error is None]
    if not ok:
        raise ContractError("every evaluation pair failed; see per-item errors")
    report = EvalReport(
        items=items,
        mean_ssim=float(np.mean([it.ssim for it in ok])),
        mean_ms_ssim=float(np.mean([it.ms_ssim for it in ok])),
        mean_ld=float(np.mean([it.ld for it in ok])),
        protocol_note=(
            f"SSIM at original resolution; MS-SSIM/LD at ~{PROTOCOL_AREA} sq px "
            "(aspect preserved, even extents)"
        ),
    )
    return report


def write_report(report: EvalReport, csv_path: str, json_path: str | None = None):
    tmp = csv_path + ".tmp"
    with open(tmp, "w") as f:
        f.write("name,ssim,ms_ssim,ld\n")
        for it in report.items:
            if it.error is None:
                f.write(f"{it.name},{it.ssim:.6f},{it.ms_ssim:.6f},{it.ld:.4f}\n")
            else:
                f.write(f"{it.name},error,error,error\n")
        f.write(f"mean,{report.mean_ssim:.6f},{report.mean_ms_ssim:.6f},{report.mean_ld:.4f}\n")
    os.replace(tmp, csv_path)
    if json_path:
        payload = {
            "items": [vars(it) for it in report.items],
            "mean_ssim": report.mean_ssim,
            "mean_ms_ssim": report.mean_ms_ssim,
            "mean_ld": report.mean_ld,
            "protocol_note": report.protocol_note,
        }
        tmp = json_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
        os.replace(tmp, json_path)


def summary_text(report: EvalReport) -> str:
    ok = sum(1 for it in report.items if it.error is None)
    lines = [
        f"evaluated {ok}/{len(report.items)} pairs",
        f"mean SSIM    {report.mean_ssim:.4f}",
        f"mean MS-SSIM {report.mean_ms_ssim:.4f}",
        f"mean LD      {report.mean_ld:.2f} px",
        report.protocol_note,
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Small shared helpers used by tests and the smoke pipeline


def psnr(a: np.ndarray, b: np.ndarray, border_frac: float = 0.0) -> float:
    """Peak signal-to-noise ratio on [0,1] images; optional border mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if border_frac > 0:
        my = int(round(a.shape[0] * border_frac))
        mx = int(round(a.shape[1] * border_frac))
        a = a[my : a.shape[0] - my, mx : a.shape[1] - mx]
        b = b[my : b.shape[0] - my, mx : b.shape[1] - mx]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def grid_endpoint_error(pred, target) -> float:
    """Mean per-pixel L2 distance between two grids (normalized units)."""
    p = pred.map if isinstance(pred, DenseGrid) else np.asarray(pred)
    t = target.map if isinstance(target, DenseGrid) else np.asarray(target)
    if p.shape != t.shape:
        raise DimensionError(f"grid shapes differ: {p.shape} vs {t.shape}")
    d = p.astype(np.float64) - t.astype(np.float64)
    return float(np.hypot(d[0], d[1]).mean())
