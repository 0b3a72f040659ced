"""Minimal dense-tensor engine with reverse-mode autodiff.

Covers exactly the layer vocabulary the dewarping network needs: 2-D
convolution (cross-correlation), 2x2 max pooling, align-corners bilinear
2x upsampling, channel concat/split, relu/sigmoid/tanh, batch
normalization, elementwise arithmetic and scalar reductions.

Gradients are recorded on an explicit :class:`Tape`.  Forward ops executed
inside a ``with Tape() as tape:`` block append backward rules; calling
:func:`backward` replays them in reverse, accumulating into ``.grad``
buffers.  Storage is float32 by default; float64 inputs are preserved so
numerical oracles can run the same code paths at higher precision.

Tensors are treated as immutable after creation; one training step owns
its tape exclusively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .interp import interp_matrix

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Each entry pairs an op's output with a closure that routes the output's
    gradient back into the inputs' ``.grad`` buffers.  Replaying entries in
    reverse order visits every node exactly once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, output: Tensor, backward_fn):
        self._nodes.append((output, backward_fn))
        self._output_ids.add(id(output))

    def __len__(self) -> int:
        return len(self._nodes)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap op output; record on the active tape when gradients are needed."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs if isinstance(t, Tensor))
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if isinstance(t, Tensor) and t.requires_grad:
        t.grad += g.astype(t.grad.dtype, copy=False)


def backward(tape: Tape, loss: Tensor):
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._output_ids:
        raise ContractError("loss tensor was not produced under this tape")
    loss.grad += np.ones_like(loss.data)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# Convolution


@dataclass
class ConvParams:
    """Weights of one conv layer: weight (C_out, C_in, k, k), bias (C_out,)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise DimensionError(f"conv weight must be 4-D, got rank {self.weight.data.ndim}")
        co, ci, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise ContractError(f"kernel must be square with k in {{1,3}}, got {kh}x{kw}")
        if self.bias.shape != (co,):
            raise DimensionError(
                f"bias axis 0 must match out-channels {co}, got {self.bias.shape}"
            )
        if self.stride < 1:
            raise ContractError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ContractError(f"padding must be non-negative, got {self.padding}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-D cross-correlation plus bias (no kernel flip)."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (N,C,H,W), got rank {x.data.ndim}")
    n, c, h, w = x.shape
    co, ci, k, _ = params.weight.shape
    if c != ci:
        raise DimensionError(f"input channel axis 1 is {c}, weight expects {ci}")
    s, p = params.stride, params.padding
    if h + 2 * p < k or w + 2 * p < k:
        raise DimensionError(f"padded spatial extent smaller than kernel {k}")
    if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
        raise DimensionError(
            f"spatial extents ({h},{w}) with padding {p} not divisible by stride {s}"
        )
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1

    wt, bias = params.weight, params.bias
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # im2col: one strided-window copy, then a single batched matmul
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * s, s3 * s)
    )
    cols = windows.reshape(n, c * k * k, ho * wo)
    w2 = wt.data.reshape(co, c * k * k)
    out = np.matmul(w2[None], cols) + bias.data.reshape(1, co, 1)
    out = out.reshape(n, co, ho, wo)

    def bwd(g: np.ndarray):
        gf = g.reshape(n, co, ho * wo)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if wt.requires_grad:
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(wt, gw.reshape(wt.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], gf).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += gcols[
                        :, :, ki, kj
                    ]
            _accum(x, gxp[:, :, p : p + h, p : p + w] if p else gxp)

    return _result(out, (x, wt, bias), bwd)


# ---------------------------------------------------------------------------
# Pooling and upsampling


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Backward routes to the first-seen argmax
    in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 input must be 4-D, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got ({h},{w})")
    h2, w2 = h // 2, w // 2
    win = (
        x.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        gwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        _accum(x, gx)

    return _result(out, (x,), bwd)


def _apply_axis_matrix(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ m.T.astype(arr.dtype), -1, axis)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Double both spatial extents with align-corners bilinear interpolation."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample input must be 4-D, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    my = interp_matrix(h, 2 * h)
    mx = interp_matrix(w, 2 * w)
    out = _apply_axis_matrix(_apply_axis_matrix(x.data, my, 2), mx, 3)

    def bwd(g: np.ndarray):
        gx = _apply_axis_matrix(_apply_axis_matrix(g, mx.T, 3), my.T, 2)
        _accum(x, gx)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Channel concat / split


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.data.ndim != 4:
            raise DimensionError(f"part {i} must be 4-D, got rank {p.data.ndim}")
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise DimensionError(
                f"part {i} has N/H/W {p.shape[0]}x{p.shape[2:]} incompatible with "
                f"{ref[0]}x{ref[2:]}"
            )
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g: np.ndarray):
        lo = 0
        for p, sz in zip(parts, sizes):
            _accum(p, g[:, lo : lo + sz])
            lo += sz

    return _result(out, tuple(parts), bwd)


def split_channels(x: Tensor, sizes: list[int]) -> list[Tensor]:
    if x.data.ndim != 4:
        raise DimensionError(f"split input must be 4-D, got rank {x.data.ndim}")
    if sum(sizes) != x.shape[1]:
        raise DimensionError(
            f"split sizes {sizes} sum to {sum(sizes)}, channel axis has {x.shape[1]}"
        )
    outs = []
    lo = 0
    for sz in sizes:
        lo_c = lo

        def bwd(g: np.ndarray, lo_c=lo_c, sz=sz):
            if x.requires_grad:
                x.grad[:, lo_c : lo_c + sz] += g.astype(x.grad.dtype, copy=False)

        outs.append(_result(x.data[:, lo : lo + sz].copy(), (x,), bwd))
        lo += sz
    return outs


# ---------------------------------------------------------------------------
# Pointwise nonlinearities and elementwise arithmetic


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        out = np.maximum(x.data, 0)

        def bwd(g):
            _accum(x, g * (x.data > 0))

    elif kind == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-x.data))

        def bwd(g, y=out):
            _accum(x, g * (y * (1.0 - y)))

    elif kind == "tanh":
        out = np.tanh(x.data)

        def bwd(g, y=out):
            _accum(x, g * (1.0 - y * y))

    else:
        raise ContractError(f"unknown pointwise kind {kind!r}")
    return _result(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return pointwise(x, "tanh")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _result(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch {a.shape} vs {b.shape}")
    out = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.  ``b`` may carry singleton axes that broadcast
    against ``a`` (e.g. a 1-channel gate or a constant weight mask); general
    broadcasting is out of scope."""
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"mul rank mismatch {a.shape} vs {b.shape}")
    for ax, (da, db) in enumerate(zip(a.shape, b.shape)):
        if db != da and db != 1:
            raise DimensionError(f"mul axis {ax}: {db} does not broadcast to {da}")
    bcast_axes = tuple(ax for ax, (da, db) in enumerate(zip(a.shape, b.shape)) if db == 1 and da != 1)
    out = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        if b.requires_grad:
            gb = g * a.data
            if bcast_axes:
                gb = gb.sum(axis=bcast_axes, keepdims=True)
            _accum(b, gb)

    return _result(out, (a, b), bwd)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def bwd(g):
        _accum(x, 2.0 * g * x.data)

    return _result(out, (x,), bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + c

    def bwd(g):
        _accum(x, g)

    return _result(out, (x,), bwd)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def bwd(g):
        _accum(x, g * c)

    return _result(out, (x,), bwd)


def sub_from_scalar(c: float, x: Tensor) -> Tensor:
    out = c - x.data

    def bwd(g):
        _accum(x, -g)

    return _result(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _result(out, (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    passthrough = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _accum(x, g * passthrough)

    return _result(out, (x,), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.data.dtype))

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(out, (x,), bwd)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum(dtype=x.data.dtype) / n)

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Batch normalization


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    Running stats update as ``running = momentum * running + (1 - momentum)
    * batch`` with momentum 0.9; variance is the biased (1/N) estimate
    throughout.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9,
                 dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm input must be 4-D, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise DimensionError(f"channel axis 1 is {c}, state expects {state.channels}")
    gamma, beta = state.scale, state.shift
    g4 = gamma.data.reshape(1, c, 1, 1)
    red = (0, 2, 3)
    m = n * h * w

    if training:
        mu = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mu).astype(
            state.running_mean.dtype
        )
        state.running_var = (mom * state.running_var + (1 - mom) * var).astype(
            state.running_var.dtype
        )
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def bwd(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=red))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=red))
            if x.requires_grad:
                gxh = g * g4
                mean_g = gxh.mean(axis=red).reshape(1, c, 1, 1)
                mean_gx = (gxh * xhat).mean(axis=red).reshape(1, c, 1, 1)
                gx = (gxh - mean_g - xhat * mean_gx) * inv.reshape(1, c, 1, 1)
                _accum(x, gx)

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def bwd(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=red))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=red))
            if x.requires_grad:
                _accum(x, g * g4 * inv.reshape(1, c, 1, 1))

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bwd)
