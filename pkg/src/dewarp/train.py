"""Optimization loop, Adam, checkpointing, loss logging.

Determinism contract: (seed, config, dataset) fully determine the run.
Batch indices for step t come from a stateless per-step RNG keyed on
(seed, t), so resuming from a checkpoint at step k reproduces the
uninterrupted trajectory bit-for-bit without serializing RNG state.

Checkpoint format (".rnv2", little-endian): magic "RNV2" | version u32 |
metadata-length u32 | metadata (textual key=value lines, sorted keys) |
then per record: name-length u16, name bytes, rank u8, dims u32*rank,
float32 payload.  Records hold the model parameters in canonical order,
the batch-norm running statistics, and (when present) the Adam moment
buffers named ``adam.m.<param>`` / ``adam.v.<param>``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, FormatError, NumericError
from .losses import BoundaryWeightMask, combined_loss
from .model import DewarpModel, ModelConfig
from .synthwarp import load_sample, read_manifest

_CKPT_MAGIC = b"RNV2"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    data_dir: str = ""
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_lambda: float = 0.9
    boundary_omega: float = 5.0
    boundary_taper: float | None = None
    seed: int = 0
    checkpoint_interval: int = 0
    log_path: str | None = None
    model: ModelConfig = dc_field(default_factory=ModelConfig)


class AdamMoments:
    """First/second moment buffers, one pair per parameter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}


def adam_step(params: dict, moments: AdamMoments, config: TrainConfig, t: int):
    """One bias-corrected Adam update; t counts optimizer steps from 1."""
    if t < 1:
        raise ConfigError(f"adam step counter must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lr = config.learning_rate
    eps = config.adam_eps
    for name, p in params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name} at step {t}")
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Checkpoint serialization


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path: str, model: DewarpModel, step: int,
                    moments: AdamMoments | None = None):
    meta = {
        "base_width": model.config.base_width,
        "has_moments": 1 if moments is not None else 0,
        "input_size": model.config.input_size,
        "step": step,
    }
    meta_blob = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("ascii")
    pieces = [struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(meta_blob)), meta_blob]
    for name, tensor in model.params.items():
        pieces.append(_encode_record(name, tensor.data))
    for name, buf in model.named_buffers():
        pieces.append(_encode_record(name, buf))
    if moments is not None:
        for name in model.params:
            pieces.append(_encode_record("adam.m." + name, moments.m[name]))
        for name in model.params:
            pieces.append(_encode_record("adam.v." + name, moments.v[name]))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(pieces))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    arrays: dict  # name -> float32 ndarray, insertion order preserved
    has_moments: bool


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError("checkpoint shorter than fixed header", offset=len(blob))
    magic, version, meta_len = struct.unpack_from("<4sII", blob, 0)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    if pos + meta_len > len(blob):
        raise FormatError("metadata extends past end of file", offset=len(blob))
    meta = {}
    for line in blob[pos : pos + meta_len].decode("ascii").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = int(v)
    pos += meta_len
    for key in ("base_width", "input_size", "step", "has_moments"):
        if key not in meta:
            raise FormatError(f"metadata missing key {key}", offset=12)

    arrays: dict = {}
    n = len(blob)
    while pos < n:
        if pos + 2 > n:
            raise FormatError("truncated record header", offset=pos)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + name_len > n:
            raise FormatError("truncated record name", offset=pos)
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > n:
            raise FormatError(f"truncated rank for {name}", offset=pos)
        rank = blob[pos]
        pos += 1
        if pos + 4 * rank > n:
            raise FormatError(f"truncated dims for {name}", offset=pos)
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 4 * count > n:
            raise FormatError(f"truncated payload for {name}", offset=pos)
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in arrays:
            raise FormatError(f"duplicate record {name}", offset=pos)
        arrays[name] = arr.copy()

    cfg = ModelConfig(input_size=meta["input_size"], base_width=meta["base_width"])
    return Checkpoint(config=cfg, step=meta["step"], arrays=arrays,
                      has_moments=bool(meta["has_moments"]))


def restore_model(ckpt: Checkpoint):
    """Rebuild (model, moments) from a parsed checkpoint."""
    model = DewarpModel(ckpt.config, init_seed=0)
    for name, tensor in model.params.items():
        if name not in ckpt.arrays:
            raise ConfigError(f"checkpoint missing parameter {name}")
        arr = ckpt.arrays[name]
        if arr.shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data[...] = arr
    for name, _ in model.named_buffers():
        if name in ckpt.arrays:
            model.set_buffer(name, ckpt.arrays[name])
    moments = None
    if ckpt.has_moments:
        moments = AdamMoments(model.params)
        for name in model.params:
            moments.m[name][...] = ckpt.arrays["adam.m." + name]
            moments.v[name][...] = ckpt.arrays["adam.v." + name]
    return model, moments


# ---------------------------------------------------------------------------
# Dataset access and the training loop


class MemoryDataset:
    """Whole dataset resident as stacked arrays (desk-scale sizes)."""

    def __init__(self, data_dir: str, limit: int | None = None):
        manifest = read_manifest(data_dir)
        self.size = manifest["size"]
        count = manifest["count"] if limit is None else min(limit, manifest["count"])
        images, grids, edges = [], [], []
        for i in range(count):
            warped, grid, edge, _ = load_sample(data_dir, i)
            images.append(np.transpose(warped, (2, 0, 1)))
            grids.append(grid.map)
            edges.append(edge[None].astype(np.float32))
        self.images = np.stack(images).astype(np.float32)
        self.grids = np.stack(grids).astype(np.float32)
        self.edges = np.stack(edges).astype(np.float32)
        self.count = count

    def batch(self, indices):
        return (
            self.images[indices],
            self.grids[indices],
            self.edges[indices],
        )


def batch_indices(seed: int, step: int, count: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1, step])
    return rng.integers(0, count, size=batch_size)


def format_log_row(step: int, grid_l: float, edge_l: float, total: float) -> str:
    return f"{step},{grid_l:.8e},{edge_l:.8e},{total:.8e}"


@dataclass
class TrainResult:
    model: DewarpModel
    moments: AdamMoments
    log_rows: list
    final_step: int


def train(config: TrainConfig, out_path: str | None = None,
          resume_from: str | None = None, progress=None) -> TrainResult:
    """Run the optimization loop; returns the final state and loss log."""
    dataset = MemoryDataset(config.data_dir)
    if dataset.size != config.model.input_size:
        raise ConfigError(
            f"dataset size {dataset.size} does not match model input_size "
            f"{config.model.input_size}"
        )
    if dataset.count < 1:
        raise ConfigError("dataset is empty")

    if resume_from is not None:
        model, moments = restore_model(load_checkpoint(resume_from))
        if moments is None:
            raise ConfigError("resume checkpoint has no optimizer state")
        ckpt_step = load_checkpoint(resume_from).step
        start = ckpt_step
    else:
        model = DewarpModel(config.model, init_seed=config.seed)
        moments = AdamMoments(model.params)
        start = 0

    mask = BoundaryWeightMask(config.model.input_size, omega=config.boundary_omega,
                              taper=config.boundary_taper)
    log_rows = []
    for step in range(start + 1, config.steps + 1):
        idx = batch_indices(config.seed, step, dataset.count, config.batch_size)
        imgs, grids, edges = dataset.batch(idx)
        x = ag.Tensor(imgs)
        with ag.Tape() as tape:
            grid_pred, edge_pred = model.forward(x, training=True)
            total, g_l, e_l = combined_loss(grid_pred, grids, edge_pred, edges,
                                            mask, lam=config.loss_lambda)
        model.zero_grads()
        ag.backward(tape, total)
        adam_step(model.params, moments, config, step)
        row = format_log_row(step, g_l.item(), e_l.item(), total.item())
        log_rows.append(row)
        if progress is not None:
            progress(step, row)
        if (
            config.checkpoint_interval
            and out_path
            and step % config.checkpoint_interval == 0
            and step < config.steps
        ):
            save_checkpoint(out_path, model, step, moments)

    if out_path:
        save_checkpoint(out_path, model, config.steps, moments)
    if config.log_path:
        write_log(config.log_path, log_rows)
    return TrainResult(model=model, moments=moments, log_rows=log_rows,
                       final_step=config.steps)


def write_log(path: str, rows: list, header: bool = True):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        if header:
            f.write("step,grid_loss,edge_loss,total\n")
        for row in rows:
            f.write(row + "\n")
    os.replace(tmp, path)
