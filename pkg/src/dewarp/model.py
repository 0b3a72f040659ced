"""The dewarping network.

Two stacked U-Nets.  The first stage turns the input photo into a feature
block: a strided encoder whose taps feed a gated convolutional stream
trained against Canny edges, residual paths on the skip connections, and
a decoder; its output is the channel concat of the stem features, decoder
output and gate-stream output.  The second stage re-encodes that block,
splits its bottleneck into two halves and decodes each half with the SAME
decoder parameters (one parameter set, two passes, full skip set each) so
the x and y map channels develop without intermingling; the two 1-channel
outputs are concatenated and squashed by tanh into the final grid.

Channel schedule at base width b: stem b, encoder blocks b*2..b*16,
bottleneck b*32, gate stream and decoder output b/2.  Defaults (input 256,
base 32) reproduce the published tensor shapes exactly.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, ConvParams, Tensor
from .errors import ConfigError, DimensionError


@dataclass
class ModelConfig:
    input_size: int = 256
    base_width: int = 32

    def __post_init__(self):
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.base_width < 2 or self.base_width % 2:
            raise ConfigError(f"base_width must be even and >= 2, got {self.base_width}")

    @property
    def stream_width(self) -> int:
        return self.base_width // 2


def kaiming_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Kaiming-uniform fan-in init for conv weights (gain for ReLU)."""
    fan_in = int(np.prod(shape[1:]))
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Registry:
    """Canonical, ordered parameter and batch-norm-state store."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn_states: list[tuple[str, BatchNormState]] = []

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = tensor
        return tensor

    def add_bn(self, name: str, state: BatchNormState) -> BatchNormState:
        self.add_param(name + ".scale", state.scale)
        self.add_param(name + ".shift", state.shift)
        self.bn_states.append((name, state))
        return state


class Conv:
    def __init__(self, reg: _Registry, name: str, c_in: int, c_out: int, k: int):
        w = Tensor(kaiming_uniform(reg.rng, (c_out, c_in, k, k), reg.dtype), requires_grad=True)
        b = Tensor(np.zeros(c_out, dtype=reg.dtype), requires_grad=True)
        reg.add_param(name + ".weight", w)
        reg.add_param(name + ".bias", b)
        self.p = ConvParams(w, b, stride=1, padding=k // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.p)


class ConvBNRelu:
    def __init__(self, reg: _Registry, name: str, c_in: int, c_out: int):
        self.conv = Conv(reg, name + ".conv", c_in, c_out, 3)
        self.bn = reg.add_bn(name + ".bn", BatchNormState(c_out, dtype=reg.dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ag.relu(ag.batchnorm(self.conv(x), self.bn, training))


class EncBlock:
    """Two 3x3 conv+BN+ReLU units."""

    def __init__(self, reg: _Registry, name: str, c_in: int, c_out: int):
        self.a = ConvBNRelu(reg, name + ".conv0", c_in, c_out)
        self.b = ConvBNRelu(reg, name + ".conv1", c_out, c_out)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.b(self.a(x, training), training)


class ResPath:
    """Three chained residual units over a skip connection.

    Unit t computes relu(conv3x3(u) + conv1x1(u)); the taps after 1, 2 and
    3 units see 3x3, 5x5 and 7x7 receptive fields and are concatenated,
    then projected back to the skip's channel count by a 1x1 conv.
    """

    def __init__(self, reg: _Registry, name: str, channels: int):
        self.units = []
        for t in range(3):
            c3 = Conv(reg, f"{name}.unit{t}.conv3", channels, channels, 3)
            c1 = Conv(reg, f"{name}.unit{t}.conv1", channels, channels, 1)
            self.units.append((c3, c1))
        self.proj = Conv(reg, name + ".proj", 3 * channels, channels, 1)

    def taps(self, x: Tensor) -> list[Tensor]:
        u = x
        out = []
        for c3, c1 in self.units:
            u = ag.relu(ag.add(c3(u), c1(u)))
            out.append(u)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(ag.concat_channels(self.taps(x)))


class GatedConvLayer:
    """Sigmoid spatial gate modulating a feature stream.

    alpha = sigmoid(conv1x1(concat(stream, gate_feature))), one channel
    broadcast over the stream; output = conv3x3(stream * (1 + alpha)) +
    stream, then BN+ReLU.
    """

    def __init__(self, reg: _Registry, name: str, channels: int):
        self.gate = Conv(reg, name + ".gate", 2 * channels, 1, 1)
        self.body = Conv(reg, name + ".body", channels, channels, 3)
        self.bn = reg.add_bn(name + ".bn", BatchNormState(channels, dtype=reg.dtype))

    def __call__(self, stream: Tensor, feat: Tensor, training: bool,
                 zero_gate: bool = False) -> Tensor:
        if stream.shape != feat.shape:
            raise DimensionError(
                f"gate feature shape {feat.shape} must match stream {stream.shape}"
            )
        if zero_gate:
            gated = stream
        else:
            alpha = ag.sigmoid(self.gate(ag.concat_channels([stream, feat])))
            gated = ag.mul(stream, ag.add_scalar(alpha, 1.0))
        out = ag.add(self.body(gated), stream)
        return ag.relu(ag.batchnorm(out, self.bn, training))


class GatedConvNet:
    """Edge-attention stream over the encoder taps.

    The stem features open the stream; each tap is reduced to the stream
    width by a 1x1 conv, bilinearly upsampled to full resolution, and
    applied as a gate feature in tap order.  A 1x1 head emits edge logits.
    """

    def __init__(self, reg: _Registry, name: str, cfg: ModelConfig):
        g = cfg.stream_width
        b = cfg.base_width
        self.init = Conv(reg, name + ".stream", b, g, 1)
        tap_channels = [b * 2, b * 8, b * 16]
        self.ups_counts = [1, 3, 4]  # taps live at S/2, S/8, S/16
        self.reducers = [
            Conv(reg, f"{name}.reduce{i}", c, g, 1) for i, c in enumerate(tap_channels)
        ]
        self.gcls = [GatedConvLayer(reg, f"{name}.gcl{i}", g) for i in range(3)]
        self.edge = Conv(reg, name + ".edge", g, 1, 1)

    def __call__(self, x: Tensor, taps: list[Tensor], training: bool,
                 zero_gates: bool = False):
        s = self.init(x)
        for reducer, tap, ups, gcl in zip(self.reducers, taps, self.ups_counts, self.gcls):
            f = reducer(tap)
            for _ in range(ups):
                f = ag.upsample_bilinear2(f)
            s = gcl(s, f, training, zero_gate=zero_gates)
        return s, self.edge(s)


class Encoder:
    """Stem plus five pool+block levels; returns skips and bottleneck."""

    def __init__(self, reg: _Registry, name: str, c_in: int, base: int):
        self.stem = ConvBNRelu(reg, name + ".stem", c_in, base)
        chans = [base * m for m in (1, 2, 4, 8, 16, 32)]
        self.blocks = [
            EncBlock(reg, f"{name}.enc{i}", chans[i], chans[i + 1]) for i in range(5)
        ]
        self.res = [ResPath(reg, f"{name}.res{i}", chans[i]) for i in range(5)]

    def __call__(self, x: Tensor, training: bool):
        cur = self.stem(x, training)
        skips = [cur]
        for i, block in enumerate(self.blocks):
            cur = block(ag.maxpool2(cur), training)
            if i < 4:
                skips.append(cur)
        return skips, cur

    def res_skips(self, skips: list[Tensor]) -> list[Tensor]:
        return [rp(s) for rp, s in zip(self.res, skips)]


class Decoder:
    """Five [upsample, concat residual skip, two conv+BN+ReLU] stages."""

    def __init__(self, reg: _Registry, name: str, c_in: int, base: int, c_out: int):
        skip_ch = [base * m for m in (16, 8, 4, 2, 1)]
        out_ch = [base * 16, base * 8, base * 4, base * 2, c_out]
        self.stages = []
        prev = c_in
        for j in range(5):
            self.stages.append(
                EncBlock(reg, f"{name}.dec{j}", prev + skip_ch[j], out_ch[j])
            )
            prev = out_ch[j]

    def __call__(self, bottom: Tensor, res_skips: list[Tensor], training: bool) -> Tensor:
        cur = bottom
        for j, stage in enumerate(self.stages):
            cur = ag.upsample_bilinear2(cur)
            cur = ag.concat_channels([cur, res_skips[4 - j]])
            cur = stage(cur, training)
        return cur


class DewarpModel:
    """Full stacked network; see module docstring for the dataflow."""

    def __init__(self, config: ModelConfig, init_seed: int = 0, dtype=np.float32):
        self.config = config
        reg = _Registry(np.random.default_rng([init_seed, 0x6D6F64]), dtype)
        b = config.base_width
        self.encoder1 = Encoder(reg, "primary", 3, b)
        self.decoder1 = Decoder(reg, "primary", b * 32, b, config.stream_width)
        self.gcn = GatedConvNet(reg, "primary.gcn", config)
        self.encoder2 = Encoder(reg, "secondary", b * 2, b)
        self.decoder2 = Decoder(reg, "secondary", b * 16, b, config.stream_width)
        self.head = Conv(reg, "secondary.head", config.stream_width, 1, 1)
        self._reg = reg

    # -- parameter access ----------------------------------------------------

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        return self._reg.params

    def named_buffers(self):
        for name, state in self._reg.bn_states:
            yield name + ".running_mean", state.running_mean
            yield name + ".running_var", state.running_var

    def set_buffer(self, name: str, value: np.ndarray):
        for bn_name, state in self._reg.bn_states:
            if name == bn_name + ".running_mean":
                state.running_mean = value.astype(state.running_mean.dtype)
                return
            if name == bn_name + ".running_var":
                state.running_var = value.astype(state.running_var.dtype)
                return
        raise ConfigError(f"unknown buffer {name}")

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    # -- forward passes --------------------------------------------------

    def _check_input(self, x: Tensor):
        s = self.config.input_size
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"batch must be (N,3,S,S), got {x.shape}")
        if x.shape[2] != s or x.shape[3] != s:
            raise ConfigError(f"batch spatial {x.shape[2:]} does not match input_size {s}")

    def primary_forward(self, x: Tensor, training: bool = False,
                        return_taps: bool = False, zero_gates: bool = False):
        self._check_input(x)
        skips, bottleneck = self.encoder1(x, training)
        x0 = skips[0]
        l2, l4, l5 = skips[1], skips[3], skips[4]
        res_skips = self.encoder1.res_skips(skips)
        decoded = self.decoder1(bottleneck, res_skips, training)
        g_o, edge_logits = self.gcn(x0, [l2, l4, l5], training, zero_gates=zero_gates)
        u1 = ag.concat_channels([x0, decoded, g_o])
        edge_pred = ag.sigmoid(edge_logits)
        if return_taps:
            taps = {"X": x0, "L2": l2, "L4": l4, "L5": l5, "B": bottleneck,
                    "O": decoded, "G_o": g_o, "U1": u1}
            return u1, edge_pred, taps
        return u1, edge_pred

    def decode_half(self, half: Tensor, res_skips: list[Tensor], training: bool) -> Tensor:
        """One pass of the shared secondary decoder plus the shared head."""
        return self.head(self.decoder2(half, res_skips, training))

    def secondary_forward(self, u1: Tensor, training: bool = False,
                          return_internals: bool = False):
        skips, bottleneck = self.encoder2(u1, training)
        res_skips = self.encoder2.res_skips(skips)
        half = bottleneck.shape[1] // 2
        b1, b2 = ag.split_channels(bottleneck, [half, half])
        o1 = self.decode_half(b1, res_skips, training)
        o2 = self.decode_half(b2, res_skips, training)
        grid = ag.tanh(ag.concat_channels([o1, o2]))
        if return_internals:
            return grid, {"B1": b1, "B2": b2, "O1": o1, "O2": o2}
        return grid

    def forward(self, x: Tensor, training: bool = False):
        u1, edge_pred = self.primary_forward(x, training)
        grid = self.secondary_forward(u1, training)
        return grid, edge_pred

    def __call__(self, x: Tensor, training: bool = False):
        return self.forward(x, training)
