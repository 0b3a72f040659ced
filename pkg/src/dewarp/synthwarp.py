"""Synthetic warped-document generation with exact ground truth.

A warp is a smooth forward map ``W(u) = u + d(u)`` on the unit square,
built from a few ridge primitives (Gaussian "curve" bumps and long-tailed
"fold" creases) plus a global corner-offset jitter.  Rendering inverts W
numerically to draw the warped image, but the stored ground-truth grid is
the analytic W itself, so labels carry zero inversion error: the content
of flat-canvas point u lands at W(u) in the warped image, which is exactly
where a backward dewarping map must read.

Dataset layout on disk: ``NNNNNN.warped.ppm``, ``NNNNNN.flat.ppm``,
``NNNNNN.dgrid``, ``NNNNNN.edges.pgm`` plus ``manifest.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .canny import canny
from .errors import ContractError, NonInvertibleWarpError
from .gridsample import DenseGrid, bilinear_sample
from .imageio import luminance, save_binary_map, save_image
from .gridsample import save_grid

MAX_DRAW_ATTEMPTS = 10
INVERSION_MAX_ITERS = 30
INVERSION_STEP_TOL = 1e-4
INVERSION_RESIDUAL_TOL = 1e-3

AMPLITUDE_RANGE = (0.02, 0.12)
WIDTH_RANGE = (0.05, 0.4)
CORNER_JITTER = 0.08

# forward maps must keep this interior box inside the canvas so that the
# 10%-border-masked round trip never reads clamped garbage
_CONTAIN_BOX = (0.098, 0.902)
_CONTAIN_SLACK = 8e-3
_CHECK_LATTICE = 64


@dataclass
class WarpPrimitive:
    kind: str  # "curve" | "fold" | "shift" (shift: g == 1, test use)
    center: tuple[float, float]
    direction: tuple[float, float]  # unit 2-vector, displacement direction
    amplitude: float
    width: float

    def profile(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "curve":
            return np.exp(-(t * t) / (self.width * self.width))
        if self.kind == "fold":
            return self.width / (np.abs(t) + self.width)
        if self.kind == "shift":
            return np.ones_like(t)
        raise ContractError(f"unknown primitive kind {self.kind!r}")


@dataclass
class WarpSpec:
    seed: int
    primitives: list[WarpPrimitive] = field(default_factory=list)
    corner_offsets: np.ndarray | None = None  # (4, 2): TL, TR, BL, BR
    background: tuple[float, float, float] = (0.35, 0.35, 0.38)


@dataclass
class WarpSample:
    warped: np.ndarray  # (S, S, 3) float32 in [0,1]
    gt_grid: DenseGrid  # analytic W, normalized to [-1, 1]
    gt_edges: np.ndarray  # (S, S) uint8 {0,1}
    flat_source: np.ndarray  # (S, S, 3) float32
    spec: WarpSpec


class WarpField:
    """Evaluates W(u) = u + d(u) on (..., 2) point arrays (x, y order)."""

    def __init__(self, spec: WarpSpec):
        self.spec = spec

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        d = np.zeros_like(pts)
        for prim in self.spec.primitives:
            v = np.asarray(prim.direction, dtype=np.float64)
            c = np.asarray(prim.center, dtype=np.float64)
            t = (pts[..., 0] - c[0]) * v[0] + (pts[..., 1] - c[1]) * v[1]
            g = prim.profile(t)
            d[..., 0] += prim.amplitude * v[0] * g
            d[..., 1] += prim.amplitude * v[1] * g
        if self.spec.corner_offsets is not None:
            o = np.asarray(self.spec.corner_offsets, dtype=np.float64)
            ux = pts[..., 0][..., None]
            uy = pts[..., 1][..., None]
            d += (
                (1 - ux) * (1 - uy) * o[0]
                + ux * (1 - uy) * o[1]
                + (1 - ux) * uy * o[2]
                + ux * uy * o[3]
            )
        return d

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) + self.displacement(pts)

    def max_displacement_bound(self) -> float:
        amp = sum(p.amplitude for p in self.spec.primitives)
        if self.spec.corner_offsets is not None:
            amp += float(np.abs(self.spec.corner_offsets).max()) * np.sqrt(2.0)
        return amp


def _unit_lattice(n: int) -> np.ndarray:
    ax = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(ax, ax)
    return np.stack([gx, gy], axis=-1)


def invert_field(fld: WarpField, targets: np.ndarray):
    """Fixed-point inverse F with W(F(x)) = x, sampled at ``targets``.

    Returns (points, residual); residual is max |W(F(x)) - x| over the
    lattice.  Non-convergence shows up as a large residual, which callers
    treat as a rejection signal.
    """
    t = np.asarray(targets, dtype=np.float64)
    x = t.copy()
    for _ in range(INVERSION_MAX_ITERS):
        nxt = t - fld.displacement(x)
        step = np.abs(nxt - x).max()
        x = nxt
        if step < INVERSION_STEP_TOL:
            break
    residual = np.abs(fld(x) - t).max()
    return x, residual


def field_rejection_reason(fld: WarpField) -> str | None:
    """None when the field is usable; otherwise a short reason string."""
    lattice = _unit_lattice(_CHECK_LATTICE)
    _, residual = invert_field(fld, lattice)
    if residual >= INVERSION_RESIDUAL_TOL:
        return f"inversion residual {residual:.2e}"
    lo, hi = _CONTAIN_BOX
    inner = lattice[
        (lattice[..., 0] >= lo)
        & (lattice[..., 0] <= hi)
        & (lattice[..., 1] >= lo)
        & (lattice[..., 1] <= hi)
    ]
    w = fld(inner)
    if w.min() < -_CONTAIN_SLACK or w.max() > 1.0 + _CONTAIN_SLACK:
        return "interior content leaves the canvas"
    return None


def make_forward_field(spec: WarpSpec) -> WarpField:
    """Build the displacement field for a spec; reject unusable draws."""
    fld = WarpField(spec)
    reason = field_rejection_reason(fld)
    if reason is not None:
        raise NonInvertibleWarpError(f"spec seed {spec.seed}: {reason}")
    return fld


# peak |g'(t)| of each profile is slope_factor / width; keeping the summed
# displacement slopes below 1 makes W injective and the inversion contractive
_SLOPE_FACTOR = {"curve": float(np.sqrt(2.0 / np.e)), "fold": 1.0, "shift": 0.0}
_LIPSCHITZ_BUDGET = 0.9


def _budget_primitives(prims: list[WarpPrimitive]) -> list[WarpPrimitive]:
    """Shrink amplitudes / widen profiles until displacement slopes fit the
    contraction budget, staying inside the declared parameter ranges."""
    k = len(prims)
    slopes = [_SLOPE_FACTOR[p.kind] * p.amplitude / p.width for p in prims]
    total = sum(slopes)
    if total > _LIPSCHITZ_BUDGET:
        f = _LIPSCHITZ_BUDGET / total
        for p in prims:
            p.amplitude = max(AMPLITUDE_RANGE[0], f * p.amplitude)
    per = _LIPSCHITZ_BUDGET / k
    for p in prims:
        sf = _SLOPE_FACTOR[p.kind]
        if sf * p.amplitude / p.width > per:
            need = sf * p.amplitude / per
            if need <= WIDTH_RANGE[1]:
                p.width = need
            else:
                p.width = WIDTH_RANGE[1]
                p.amplitude = per * p.width / sf
    return prims


def _sample_spec(entropy: list[int]) -> WarpSpec:
    rng = np.random.default_rng(entropy)
    k = int(rng.integers(1, 5))
    prims = []
    for _ in range(k):
        kind = "curve" if rng.random() < 0.6 else "fold"
        center = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        ang = rng.uniform(0, 2 * np.pi)
        direction = (float(np.cos(ang)), float(np.sin(ang)))
        amplitude = float(rng.uniform(*AMPLITUDE_RANGE))
        width = float(rng.uniform(*WIDTH_RANGE))
        prims.append(WarpPrimitive(kind, center, direction, amplitude, width))
    _budget_primitives(prims)
    corners = rng.uniform(-CORNER_JITTER, CORNER_JITTER, size=(4, 2))
    background = tuple(rng.uniform(0.15, 0.55, size=3).tolist())
    return WarpSpec(seed=entropy[0], primitives=prims, corner_offsets=corners,
                    background=background)


def draw_warp(seed: int, index: int = 0) -> tuple[WarpSpec, WarpField]:
    """Sample specs until one passes the injectivity/containment gate."""
    for attempt in range(MAX_DRAW_ATTEMPTS):
        spec = _sample_spec([seed, index, 1, attempt])
        fld = WarpField(spec)
        if field_rejection_reason(fld) is None:
            return spec, fld
    raise NonInvertibleWarpError(
        f"no acceptable warp after {MAX_DRAW_ATTEMPTS} attempts (seed {seed}, index {index})"
    )


def render_sample(flat_source: np.ndarray, spec: WarpSpec) -> WarpSample:
    """Render the warped image and exact labels for a spec."""
    flat = np.asarray(flat_source, dtype=np.float32)
    if flat.ndim != 3 or flat.shape[2] != 3 or flat.shape[0] != flat.shape[1]:
        raise ContractError(f"flat source must be (S, S, 3), got {flat.shape}")
    s = flat.shape[0]
    fld = make_forward_field(spec)

    lattice = _unit_lattice(s)
    inv, residual = invert_field(fld, lattice)
    if residual >= INVERSION_RESIDUAL_TOL:
        raise NonInvertibleWarpError(f"render inversion residual {residual:.2e}")

    read_grid = DenseGrid(
        np.stack([2.0 * inv[..., 0] - 1.0, 2.0 * inv[..., 1] - 1.0]).astype(np.float32)
    )
    warped = bilinear_sample(flat, read_grid)
    tol = 1e-6
    outside = (
        (inv[..., 0] < -tol)
        | (inv[..., 0] > 1 + tol)
        | (inv[..., 1] < -tol)
        | (inv[..., 1] > 1 + tol)
    )
    bg = np.asarray(spec.background, dtype=np.float32)
    warped = np.where(outside[..., None], bg, warped).astype(np.float32)

    fwd = fld(lattice)
    gt = np.stack([2.0 * fwd[..., 0] - 1.0, 2.0 * fwd[..., 1] - 1.0]).astype(np.float32)
    gt_grid = DenseGrid(gt)
    gt_edges = canny(luminance(warped))
    return WarpSample(warped=warped, gt_grid=gt_grid, gt_edges=gt_edges,
                      flat_source=flat, spec=spec)


# ---------------------------------------------------------------------------
# Procedural flat documents


# rasterized pages are lightly band-limited so warping/unwarping resampling
# stays faithful; bars are laid out in pixels and kept >= 4 px tall so their
# interiors remain dark after the blur
_DOC_AA_SIGMA = 1.0
_MIN_BAR_PX = 4
_MIN_PITCH_PX = 6


def flat_document_layout(seed: int, size: int) -> dict:
    """Deterministic page layout: bar boxes in pixel coordinates."""
    rng = np.random.default_rng([seed, 0])
    margin = int(round(rng.uniform(0.06, 0.1) * size))
    top = margin
    bars = []
    title = bool(rng.random() < 0.5)
    if title:
        h = max(_MIN_BAR_PX, int(round(rng.uniform(0.04, 0.06) * size)))
        bars.append(
            dict(x0=margin, x1=margin + int(rng.uniform(0.35, 0.6) * size),
                 y0=top, y1=top + h, shade=float(rng.uniform(0.05, 0.3)))
        )
        top += h + max(2, int(0.04 * size))
    n_target = int(rng.integers(8, 21))
    usable = size - margin - top
    n_bars = min(n_target, max(1, usable // _MIN_PITCH_PX))
    pitch = usable / n_bars
    bar_h = int(np.clip(round(pitch * rng.uniform(0.5, 0.67)), _MIN_BAR_PX, max(_MIN_BAR_PX, pitch - 2)))
    for i in range(n_bars):
        y0 = top + int(round(i * pitch + rng.uniform(0, 0.15) * pitch))
        length = int(rng.uniform(0.55, 1.0) * (size - 2 * margin))
        bars.append(
            dict(x0=margin, x1=margin + length, y0=y0, y1=y0 + bar_h,
                 shade=float(rng.uniform(0.05, 0.32)))
        )
    rules = []
    if rng.random() < 0.3:
        rx = max(1, int(margin * rng.uniform(0.4, 0.8)))
        rules.append(dict(x0=rx, x1=rx + 2, y0=margin, y1=size - margin, shade=0.25))
    return dict(background=0.95, bars=bars, rules=rules, n_bars=n_bars + (1 if title else 0))


def make_flat_document(seed: int, size: int) -> np.ndarray:
    """Procedural text-like page: dark horizontal bars on a light ground."""
    from scipy import ndimage

    layout = flat_document_layout(seed, size)
    img = np.full((size, size), layout["background"], dtype=np.float64)
    for box in layout["bars"] + layout["rules"]:
        y0, y1 = max(0, box["y0"]), min(size, box["y1"])
        x0, x1 = max(0, box["x0"]), min(size, box["x1"])
        img[y0:y1, x0:x1] = box["shade"]
    img = ndimage.gaussian_filter(img, _DOC_AA_SIGMA)
    return np.repeat(img[:, :, None].astype(np.float32), 3, axis=2)


# ---------------------------------------------------------------------------
# Dataset generation and loading


def _augment(warped: np.ndarray, entropy: list[int], noise_sigma: float,
             brightness_jitter: float) -> np.ndarray:
    if noise_sigma <= 0 and brightness_jitter <= 0:
        return warped
    rng = np.random.default_rng(entropy)
    out = warped.astype(np.float32)
    if brightness_jitter > 0:
        out = out * (1.0 + rng.uniform(-brightness_jitter, brightness_jitter))
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_name(index: int) -> str:
    return f"{index:06d}"


def generate_dataset(out_dir: str, count: int, size: int, seed: int,
                     noise_sigma: float = 0.0, brightness_jitter: float = 0.0,
                     source_images: list[np.ndarray] | None = None) -> dict:
    """Write ``count`` samples plus manifest.json; returns the manifest."""
    if count < 1:
        raise ContractError("dataset count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    for idx in range(count):
        if source_images:
            flat = np.asarray(source_images[idx % len(source_images)], dtype=np.float32)
        else:
            flat = make_flat_document(_doc_seed(seed, idx), size)
        spec, _ = draw_warp(seed, idx)
        sample = render_sample(flat, spec)
        warped = _augment(sample.warped, [seed, idx, 2], noise_sigma, brightness_jitter)
        stem = os.path.join(out_dir, sample_name(idx))
        save_image(warped, stem + ".warped.ppm")
        save_image(sample.flat_source, stem + ".flat.ppm")
        save_grid(sample.gt_grid, stem + ".dgrid")
        save_binary_map(sample.gt_edges, stem + ".edges.pgm")
    manifest = {
        "count": count,
        "size": size,
        "seed": seed,
        "noise_sigma": noise_sigma,
        "brightness_jitter": brightness_jitter,
        "spec_ranges": {
            "num_primitives": [1, 4],
            "amplitude": list(AMPLITUDE_RANGE),
            "width": list(WIDTH_RANGE),
            "corner_jitter": CORNER_JITTER,
        },
    }
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def _doc_seed(seed: int, idx: int) -> int:
    # stable per-sample document seed, independent of warp entropy
    return int(np.random.default_rng([seed, idx, 0]).integers(0, 2**63 - 1))


def read_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ContractError(f"no manifest.json in {data_dir}")
    with open(path) as f:
        return json.load(f)


def load_sample(data_dir: str, index: int):
    """Load (warped, gt_grid, gt_edges, flat) arrays for one sample."""
    from .gridsample import load_grid
    from .imageio import load_binary_map, load_image

    stem = os.path.join(data_dir, sample_name(index))
    warped = load_image(stem + ".warped.ppm")
    flat = load_image(stem + ".flat.ppm")
    grid = load_grid(stem + ".dgrid")
    edges = load_binary_map(stem + ".edges.pgm")
    return warped, grid, edges, flat
