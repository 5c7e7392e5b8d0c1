"""
RA V-Net: CofRes encoder blocks, channel attention on the skip path, and
AR decoder blocks (quarter-width residual upsampling followed by a two-step
ConvLSTM that fuses skip and decoder features).

Plain U-Net style encoder/decoder blocks are included so the ablation
harness can swap components under the same training loop.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Conv2D, ConvBNReLU, ConvLSTMCell, ParamStore, LayerSpec, init_params, maxpool2, upsample2_nearest
from .tensor import Tensor, add, concat_channels, matmul, mul_scalar, reshape_view, sigmoid, softmax_axis, transpose_last2

ENCODERS = ("cofres", "plain")
DECODERS = ("ar", "plain")
CA_MODES = ("bottom", "all", "none")


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    base_channels: int = 64
    in_channels: int = 1
    out_channels: int = 1
    encoder: str = "cofres"
    decoder: str = "ar"
    ca: str = "bottom"

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}")
        if self.ca not in CA_MODES:
            raise ConfigError(f"ca must be one of {CA_MODES}")

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        """Two stages at 8 -> 16 channels."""
        return cls(**{"levels": 2, "base_channels": 8, **overrides})

    def stage_channels(self) -> list:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- encoder


class CofRes:
    """Four chained quarter-width 3x3 convs, concatenated, fused by a 1x1 conv
    and summed with the (projected) input."""

    def __init__(self, store: ParamStore, name: str, c_in: int, target: int, rng, dtype=np.float32):
        if target % 4:
            raise ConfigError(f"CofRes target channels must be divisible by 4, got {target}")
        q = target // 4
        self.stages = [
            ConvBNReLU(store, f"{name}.conv{i + 1}", c_in if i == 0 else q, q, rng, dtype)
            for i in range(4)
        ]
        self.fuse = Conv2D(store, f"{name}.fuse", target, target, 1, rng, dtype)
        self.proj = Conv2D(store, f"{name}.proj", c_in, target, 1, rng, dtype) if c_in != target else None
        self.target = target

    def __call__(self, x: Tensor, training: bool = True):
        if x.dims[2] % 2 or x.dims[3] % 2:
            raise ShapeError(f"CofRes input spatial dims must be even, got {x.dims[2]}x{x.dims[3]}")
        outs = []
        h = x
        for stage in self.stages:
            h = stage(h, training)
            outs.append(h)
        fused = self.fuse(concat_channels(outs))
        skip = add(fused, self.proj(x) if self.proj is not None else x)
        return skip, maxpool2(skip)


def cofres_forward(x: Tensor, block: CofRes, training: bool = True):
    return block(x, training)


class PlainEncoder:
    """Two 3x3 conv-BN-ReLU layers then 2x2 max pooling (U-Net stage)."""

    def __init__(self, store, name, c_in, target, rng, dtype=np.float32):
        self.a = ConvBNReLU(store, f"{name}.conv1", c_in, target, rng, dtype)
        self.b = ConvBNReLU(store, f"{name}.conv2", target, target, rng, dtype)
        self.target = target

    def __call__(self, x: Tensor, training: bool = True):
        if x.dims[2] % 2 or x.dims[3] % 2:
            raise ShapeError(f"encoder input spatial dims must be even, got {x.dims[2]}x{x.dims[3]}")
        skip = self.b(self.a(x, training), training)
        return skip, maxpool2(skip)


# ---------------------------------------------------------------- attention


def channel_dependency(a: Tensor) -> Tensor:
    """Softmax-normalised channel Gram matrix, shape (n, C, C).

    ``G[k, x, y] = exp(a_x . a_y) / sum_x' exp(a_x' . a_y)``, so every column
    sums to one.
    """
    if a.ndim != 4:
        raise ShapeError(f"channel_dependency expects (n, C, H, W), got {a.dims}")
    n, c, h, w = a.dims
    flat = reshape_view(a, (n, c, h * w))
    logits = matmul(flat, transpose_last2(flat))
    return softmax_axis(logits, axis=1)


class ChannelAttention:
    """Learnable blend ``e = beta * (G @ a) + a``; beta starts at zero."""

    def __init__(self, store: ParamStore, name: str, dtype=np.float32):
        init_params(LayerSpec("ca", name), store, None, dtype)
        self.beta = store[f"{name}.beta"]
        self.last_g: Optional[np.ndarray] = None

    def __call__(self, a: Tensor) -> Tensor:
        return ca_forward(a, self)


def ca_forward(a: Tensor, state: ChannelAttention) -> Tensor:
    n, c, h, w = a.dims
    g = channel_dependency(a)
    state.last_g = g.data
    weighted = reshape_view(matmul(g, reshape_view(a, (n, c, h * w))), a.dims)
    return add(mul_scalar(weighted, state.beta), a)


# ---------------------------------------------------------------- decoder


class ARUpsample:
    """1x1 reduce to C/4, nearest x2, residual pair of 3x3 convs, 1x1 back to C."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng, dtype=np.float32):
        if channels % 4:
            raise ConfigError(f"AR upsample channels must be divisible by 4, got {channels}")
        q = channels // 4
        self.reduce = Conv2D(store, f"{name}.reduce", channels, q, 1, rng, dtype)
        self.res1 = ConvBNReLU(store, f"{name}.res1", q, q, rng, dtype)
        self.res2 = ConvBNReLU(store, f"{name}.res2", q, q, rng, dtype)
        self.restore = Conv2D(store, f"{name}.restore", q, channels, 1, rng, dtype)
        self.channels = channels

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        if x.dims[1] != self.channels:
            raise ShapeError(f"AR upsample expects {self.channels} channels, got {x.dims[1]}")
        u = upsample2_nearest(self.reduce(x))
        r = self.res2(self.res1(u, training), training)
        return self.restore(add(r, u))


def ar_upsample_block(x: Tensor, block: ARUpsample, training: bool = True) -> Tensor:
    return block(x, training)


class ARLstm:
    """Two-step ConvLSTM over [skip, up] then a 3x3 conv to C/2 channels."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng, dtype=np.float32):
        if channels % 2:
            raise ConfigError(f"AR LSTM channels must be even, got {channels}")
        self.cell = ConvLSTMCell(store, f"{name}.lstm", channels, channels, rng, dtype)
        self.out = Conv2D(store, f"{name}.out", channels, channels // 2, 3, rng, dtype)
        self.channels = channels

    def __call__(self, skip_feat: Tensor, up_feat: Tensor, training: bool = True) -> Tensor:
        if skip_feat.dims != up_feat.dims:
            raise ShapeError(f"AR LSTM inputs differ: {skip_feat.dims} vs {up_feat.dims}")
        if skip_feat.dims[1] != self.channels:
            raise ShapeError(f"AR LSTM expects {self.channels} channels, got {skip_feat.dims[1]}")
        state = self.cell.initial_state(skip_feat)
        _, state = self.cell(skip_feat, state)
        h, _ = self.cell(up_feat, state)
        return self.out(h)


def ar_lstm_block(skip_feat: Tensor, up_feat: Tensor, block: ARLstm, training: bool = True) -> Tensor:
    return block(skip_feat, up_feat, training)


class PlainDecoder:
    """U-Net stage: upsample, concat with the skip, two 3x3 conv-BN-ReLU to C/2."""

    def __init__(self, store, name, channels, rng, dtype=np.float32):
        self.a = ConvBNReLU(store, f"{name}.conv1", 2 * channels, channels // 2, rng, dtype)
        self.b = ConvBNReLU(store, f"{name}.conv2", channels // 2, channels // 2, rng, dtype)

    def __call__(self, skip_feat: Tensor, deep: Tensor, training: bool = True) -> Tensor:
        up = upsample2_nearest(deep)
        return self.b(self.a(concat_channels([skip_feat, up]), training), training)


# ---------------------------------------------------------------- network


class RAVNet:
    """The assembled V-shaped network; ``store`` holds every parameter."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        store = self.store
        widths = cfg.stage_channels()

        enc_cls = CofRes if cfg.encoder == "cofres" else PlainEncoder
        self.encoders = []
        c_in = cfg.in_channels
        for lvl, target in enumerate(widths):
            self.encoders.append(enc_cls(store, f"enc{lvl}", c_in, target, rng, dtype))
            c_in = target

        ca_levels = {"bottom": [cfg.levels - 1], "all": list(range(cfg.levels)), "none": []}[cfg.ca]
        self.attention = {lvl: ChannelAttention(store, f"ca{lvl}", dtype) for lvl in ca_levels}

        self.decoders = {}
        for lvl in reversed(range(cfg.levels)):
            ch = widths[lvl]
            if cfg.decoder == "ar":
                self.decoders[lvl] = (
                    ARUpsample(store, f"dec{lvl}.up", ch, rng, dtype),
                    ARLstm(store, f"dec{lvl}.fuse", ch, rng, dtype),
                )
            else:
                self.decoders[lvl] = (None, PlainDecoder(store, f"dec{lvl}", ch, rng, dtype))
        self.head = Conv2D(store, "head", widths[0] // 2, cfg.out_channels, 1, rng, dtype)

    def check_input(self, x: Tensor):
        if x.ndim != 4 or x.dims[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (n, {self.cfg.in_channels}, H, W) input, got {x.dims}")
        h, w = x.dims[2], x.dims[3]
        for lvl in range(self.cfg.levels):
            if h % 2 or w % 2:
                raise ShapeError(
                    f"input {x.dims[2]}x{x.dims[3]} is not divisible by 2^{self.cfg.levels}: "
                    f"level {lvl} receives {h}x{w}"
                )
            h //= 2
            w //= 2

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x)
        skips = []
        h = x
        for lvl, enc in enumerate(self.encoders):
            skip, h = enc(h, training)
            if lvl in self.attention:
                skip = self.attention[lvl](skip)
            skips.append(skip)
        for lvl in reversed(range(self.cfg.levels)):
            up_block, fuse_block = self.decoders[lvl]
            if up_block is not None:
                h = fuse_block(skips[lvl], up_block(h, training), training)
            else:
                h = fuse_block(skips[lvl], h, training)
        return sigmoid(self.head(h))

    forward = __call__


def ravnet_forward(x: Tensor, net: RAVNet, mode: str = "infer") -> Tensor:
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    return net(x, training=(mode == "train"))
