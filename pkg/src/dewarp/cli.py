"""Command-line surface.

Subcommands: ``synth`` (generate a dataset), ``train``, ``dewarp`` (apply
a checkpoint to an image), ``eval`` (score rectified/scan pairs),
``postproc`` (standalone adaptive smoothing).  Exit codes: 0 success,
1 usage, 2 I/O or file-format, 3 configuration/contract, 4 numeric
failure; every failure prints a one-line diagnostic to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import autograd as ag
from .config import load_run_config
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NonInvertibleWarpError,
    NumericError,
)
from .gridsample import DenseGrid, bilinear_sample, identity_grid, save_grid, upsample_grid
from .imageio import load_image, save_image
from .interp import resize_image
from .metrics import evaluate, summary_text, write_report
from .postproc import PostprocParams, adaptive_smooth
from .synthwarp import generate_dataset
from .train import TrainConfig, load_checkpoint, restore_model, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dewarp", description="Document image dewarping toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic warped-document dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=None, help="Gaussian noise sigma")
    sp.add_argument("--brightness", type=float, default=None, help="brightness jitter")
    sp.add_argument("--config", default=None)

    tp = sub.add_parser("train", help="train the model on a dataset directory")
    tp.add_argument("--data", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--out", required=True)
    tp.add_argument("--steps", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--batch-size", type=int, default=None)
    tp.add_argument("--log", default=None)
    tp.add_argument("--resume", default=None)
    tp.add_argument("--quiet", action="store_true")

    dp = sub.add_parser("dewarp", help="dewarp one image with a trained checkpoint")
    dp.add_argument("--model", required=True,
                    help="checkpoint path, or 'identity' for the no-op baseline")
    dp.add_argument("--in", dest="input", required=True)
    dp.add_argument("--out", required=True)
    dp.add_argument("--grid-out", default=None)
    dp.add_argument("--no-postproc", action="store_true")
    dp.add_argument("--rho", type=float, default=None, help="sharpness retention ratio")
    dp.add_argument("--config", default=None)

    ep = sub.add_parser("eval", help="score rectified/scan pairs (CSV report)")
    ep.add_argument("--pairs", required=True,
                    help="JSON manifest: [{name, rectified, scan}, ...]")
    ep.add_argument("--out", required=True)
    ep.add_argument("--json", default=None)

    pp = sub.add_parser("postproc", help="adaptive bilateral smoothing of an image")
    pp.add_argument("--in", dest="input", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--rho", type=float, default=None)
    pp.add_argument("--sigma-s", type=float, default=None)
    pp.add_argument("--sigma-r", type=float, default=None)
    pp.add_argument("--config", default=None)
    return p


def _postproc_params(cfg_params: PostprocParams, rho, sigma_s, sigma_r) -> PostprocParams:
    return PostprocParams(
        spatial_sigma=sigma_s if sigma_s is not None else cfg_params.spatial_sigma,
        range_sigma=sigma_r if sigma_r is not None else cfg_params.range_sigma,
        retention=rho if rho is not None else cfg_params.retention,
        max_attempts=cfg_params.max_attempts,
    )


def _cmd_synth(args) -> int:
    cfg = load_run_config(args.config).synth
    noise = args.noise if args.noise is not None else cfg.noise_sigma
    bright = args.brightness if args.brightness is not None else cfg.brightness_jitter
    manifest = generate_dataset(args.out, count=args.count, size=args.size,
                                seed=args.seed, noise_sigma=noise,
                                brightness_jitter=bright)
    print(f"wrote {manifest['count']} samples at {manifest['size']}px to {args.out}")
    return 0


def _cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    cfg: TrainConfig = run_cfg.train
    cfg.data_dir = args.data
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.log is not None:
        cfg.log_path = args.log

    def progress(step, row):
        if not args.quiet and (step % 25 == 0 or step == 1):
            print(row, flush=True)

    result = train(cfg, out_path=args.out, resume_from=args.resume, progress=progress)
    print(f"trained {result.final_step} steps -> {args.out}")
    return 0


def _model_grid_fn(model_arg: str, run_cfg):
    """Return (grid_provider, native_size); provider maps image -> DenseGrid."""
    if model_arg == "identity":
        size = run_cfg.model.input_size

        def provider(image) -> DenseGrid:
            return identity_grid(size, size)

        return provider, size

    ckpt = load_checkpoint(model_arg)
    model, _ = restore_model(ckpt)
    size = model.config.input_size

    def provider(image) -> DenseGrid:
        small = resize_image(image, size, size)
        batch = ag.Tensor(np.transpose(small, (2, 0, 1))[None].astype(np.float32))
        grid, _ = model.forward(batch, training=False)
        return DenseGrid(grid.data[0])

    return provider, size


def run_dewarp_pipeline(image: np.ndarray, grid_provider, postproc_params=None):
    """load -> grid at native scale -> upsample -> sample -> optional smoothing."""
    if image.ndim == 2:
        color = np.repeat(image[:, :, None], 3, axis=2)
        was_gray = True
    else:
        color, was_gray = image, False
    grid = grid_provider(color)
    h, w = color.shape[:2]
    full = upsample_grid(grid, h, w)
    out = bilinear_sample(color, full)
    if postproc_params is not None:
        out = adaptive_smooth(out, postproc_params)
    if was_gray:
        out = out[:, :, 0]
    return out, grid


def _cmd_dewarp(args) -> int:
    run_cfg = load_run_config(args.config)
    image = load_image(args.input)
    provider, _ = _model_grid_fn(args.model, run_cfg)
    pp = None if args.no_postproc else _postproc_params(run_cfg.postproc, args.rho, None, None)
    out, grid = run_dewarp_pipeline(image, provider, pp)
    save_image(out, args.out)
    if args.grid_out:
        save_grid(grid, args.grid_out)
    print(f"dewarped {args.input} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    with open(args.pairs) as f:
        try:
            entries = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"pairs manifest is not valid JSON: {exc}")
    if not isinstance(entries, list):
        raise FormatError("pairs manifest must be a JSON list")
    pairs, names = [], []
    for i, e in enumerate(entries):
        for key in ("rectified", "scan"):
            if key not in e:
                raise FormatError(f"pairs entry {i} missing key '{key}'")
        pairs.append((load_image(e["rectified"]), load_image(e["scan"])))
        names.append(e.get("name", f"pair{i:03d}"))
    report = evaluate(pairs, names=names)
    write_report(report, args.out, json_path=args.json)
    print(summary_text(report))
    return 0


def _cmd_postproc(args) -> int:
    run_cfg = load_run_config(args.config)
    params = _postproc_params(run_cfg.postproc, args.rho, args.sigma_s, args.sigma_r)
    image = load_image(args.input)
    save_image(adaptive_smooth(image, params), args.out)
    print(f"smoothed {args.input} -> {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "dewarp": _cmd_dewarp,
    "eval": _cmd_eval,
    "postproc": _cmd_postproc,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, NonInvertibleWarpError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())
