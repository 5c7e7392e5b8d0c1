"""
Parameterised layers on top of :mod:`ravnet.tensor`.

Kernels are vectorised with numpy: convolution goes through an im2col view
built by ``sliding_window_view``, pooling and upsampling through reshapes.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    _result,
    add,
    concat_channels,
    mul,
    sigmoid,
    slice_channels,
    tanh,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ParamStore:
    """Named, ordered trainable tensors, non-trainable buffers and Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __len__(self):
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, dtype=value.dtype, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray):
        if name in self:
            raise ConfigError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "ParamStore":
        """Convert every array in place (tensor objects are kept)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        for moments in (self.m, self.v):
            for k in moments:
                moments[k] = moments[k].astype(dtype)
        return self

    def arrays(self) -> dict:
        """Parameters followed by buffers, as plain arrays."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out


# ---------------------------------------------------------------- init


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "bn", "ca" or "convlstm"
    name: str
    c_in: int = 1
    c_out: int = 1
    k: int = 3


def he_normal(shape, rng, dtype=np.float32) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(spec: LayerSpec, store: ParamStore, rng, dtype=np.float32) -> dict:
    """Create and register the entries of one layer; returns them by name.

    ``rng`` is a seed or a ``numpy.random.Generator``; draws happen in a fixed
    order, so a seed fully determines the result.
    """
    rng = np.random.default_rng(rng)
    if spec.c_in < 1 or spec.c_out < 1 or spec.k < 1:
        raise ConfigError(f"non-positive layer dimensions in {spec}")
    name = spec.name
    if spec.kind == "conv":
        entries = {
            f"{name}.weight": he_normal((spec.c_out, spec.c_in, spec.k, spec.k), rng, dtype),
            f"{name}.bias": np.zeros(spec.c_out, dtype=dtype),
        }
    elif spec.kind == "convlstm":
        # c_in counts input plus hidden channels, c_out the hidden channels
        entries = {
            f"{name}.weight": he_normal((4 * spec.c_out, spec.c_in, spec.k, spec.k), rng, dtype),
            f"{name}.bias": np.zeros(4 * spec.c_out, dtype=dtype),
        }
    elif spec.kind == "bn":
        entries = {
            f"{name}.gamma": np.ones(spec.c_out, dtype=dtype),
            f"{name}.beta": np.zeros(spec.c_out, dtype=dtype),
        }
        store.add_buffer(f"{name}.running_mean", np.zeros(spec.c_out, dtype=dtype))
        store.add_buffer(f"{name}.running_var", np.ones(spec.c_out, dtype=dtype))
    elif spec.kind == "ca":
        entries = {f"{name}.beta": np.zeros(1, dtype=dtype)}
    else:
        raise ConfigError(f"unknown layer kind {spec.kind!r}")
    for key, value in entries.items():
        store.add(key, value)
    return entries


# ---------------------------------------------------------------- kernels


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' cross-correlation with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.dims}, {weight.dims}")
    n, c, h, w = x.dims
    c_out, c_in, k, k2 = weight.dims
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if h < k or w < k:
        raise ShapeError(f"conv2d: spatial dims {h}x{w} smaller than kernel {k}")
    if bias is not None and bias.dims != (c_out,):
        raise ShapeError(f"conv2d: bias dims {bias.dims} != ({c_out},)")
    pad = k // 2
    wd = weight.data
    if k == 1:
        cols = x.data
        out = np.einsum("nchw,oc->nohw", cols, wd[:, :, 0, 0], optimize=True)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        # (n, h, w, c, k, k) contiguous im2col buffer
        cols = np.ascontiguousarray(sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5))
        out = np.tensordot(cols, wd, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        if k == 1:
            dw = np.einsum("nohw,nchw->oc", g, cols, optimize=True)[:, :, None, None]
            dx = np.einsum("nohw,oc->nchw", g, wd[:, :, 0, 0], optimize=True)
        else:
            dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 1, 2]))
            dcols = np.tensordot(g, wd, axes=([1], [0]))  # (n, h, w, c, k, k)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
        grads = (dx, dw.astype(g.dtype, copy=False))
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first element."""
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        dx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _result("maxpool2", out, (x,), backward)


def upsample2_nearest(x: Tensor) -> Tensor:
    n, c, h, w = x.dims
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result("upsample2", out, (x,), backward)


def batchnorm_op(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalisation over (n, h, w).

    In training mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch`` (biased variance).
    """
    if x.ndim != 4 or x.dims[1] != gamma.size:
        raise ShapeError(f"batchnorm: input {x.dims} vs {gamma.size} channels")
    xd = x.data
    dtype = xd.dtype
    eps = dtype.type(eps)
    bshape = (1, -1, 1, 1)
    gd = gamma.data.reshape(bshape)
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = dtype.type(momentum)
        running_mean[...] = mom * running_mean + (1 - mom) * mean
        running_var[...] = mom * running_var + (1 - mom) * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (xd - mean.reshape(bshape)) * inv_std
    out = xhat * gd + beta.data.reshape(bshape)
    count = xd.size // xd.shape[1]

    def backward(g):
        dgamma = np.sum(g * xhat, axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
            dx = inv_std / count * (count * dxhat - sum_d - xhat * sum_dx)
        else:
            dx = dxhat * inv_std
        return dx.astype(dtype, copy=False), dgamma, dbeta

    return _result("batchnorm", out.astype(dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------- layers


class Conv2D:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int, rng, dtype=np.float32):
        if k not in (1, 3):
            raise ConfigError(f"kernel size must be 1 or 3, got {k}")
        init_params(LayerSpec("conv", name, c_in, c_out, k), store, rng, dtype)
        self.weight = store[f"{name}.weight"]
        self.bias = store[f"{name}.bias"]
        self.c_in, self.c_out, self.k = c_in, c_out, k

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm2D:
    """Holds gamma/beta and looks its running statistics up in the store."""

    def __init__(self, store: ParamStore, name: str, c: int, dtype=np.float32,
                 eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        init_params(LayerSpec("bn", name, c, c), store, None, dtype)
        self.store = store
        self.name = name
        self.gamma = store[f"{name}.gamma"]
        self.beta = store[f"{name}.beta"]
        self.eps = eps
        self.momentum = momentum

    @property
    def running_mean(self) -> np.ndarray:
        return self.store.buffers[f"{self.name}.running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self.store.buffers[f"{self.name}.running_var"]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm(x, self, "train" if training else "infer")


def batchnorm(x: Tensor, p: BatchNorm2D, mode: str = "train") -> Tensor:
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return batchnorm_op(x, p.gamma, p.beta, p.running_mean, p.running_var,
                        mode == "train", p.eps, p.momentum)


class ConvBNReLU:
    def __init__(self, store, name, c_in, c_out, rng, dtype=np.float32, k=3):
        self.conv = Conv2D(store, f"{name}.conv", c_in, c_out, k, rng, dtype)
        self.bn = BatchNorm2D(store, f"{name}.bn", c_out, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(self.conv(x), training).relu()


# ---------------------------------------------------------------- ConvLSTM

GATES = ("input", "forget", "output", "candidate")


@dataclass
class ConvLSTMState:
    h: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.h.dims != self.cell.dims:
            raise ShapeError(f"ConvLSTM state dims differ: {self.h.dims} vs {self.cell.dims}")

    @classmethod
    def zeros(cls, n, c, h, w, dtype=np.float32) -> "ConvLSTMState":
        return cls(Tensor(np.zeros((n, c, h, w), dtype=dtype)), Tensor(np.zeros((n, c, h, w), dtype=dtype)))


class ConvLSTMCell:
    """Convolutional LSTM cell with 3x3 same-padded gate convolutions.

    The gate pre-activations conv(x) + conv(h) + bias are computed as one
    convolution over the channel concatenation [x, h]; output channels are
    laid out in ``GATES`` order, ``hidden`` channels each.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, hidden: int, rng, dtype=np.float32):
        init_params(LayerSpec("convlstm", name, c_in + hidden, hidden, 3), store, rng, dtype)
        self.weight = store[f"{name}.weight"]
        self.bias = store[f"{name}.bias"]
        self.c_in, self.hidden = c_in, hidden

    def gate_bias(self, gate: str) -> np.ndarray:
        """Writable view of one gate's bias slice."""
        i = GATES.index(gate)
        return self.bias.data[i * self.hidden:(i + 1) * self.hidden]

    def initial_state(self, x: Tensor) -> ConvLSTMState:
        n, _, h, w = x.dims
        return ConvLSTMState.zeros(n, self.hidden, h, w, x.dtype)

    def __call__(self, x_t: Tensor, state: Optional[ConvLSTMState] = None):
        return convlstm_step(x_t, state if state is not None else self.initial_state(x_t), self)


def convlstm_step(x_t: Tensor, state: ConvLSTMState, cell: ConvLSTMCell):
    """One ConvLSTM update; returns ``(h_next, ConvLSTMState(h_next, cell_next))``."""
    if x_t.ndim != 4 or x_t.dims[1] != cell.c_in:
        raise ShapeError(f"convlstm_step: input {x_t.dims} vs {cell.c_in} input channels")
    n, _, h, w = x_t.dims
    if state.h.dims != (n, cell.hidden, h, w):
        raise ShapeError(f"convlstm_step: state {state.h.dims} does not match input {x_t.dims}")
    z = conv2d(concat_channels([x_t, state.h]), cell.weight, cell.bias)
    c = cell.hidden
    i_t = sigmoid(slice_channels(z, 0, c))
    f_t = sigmoid(slice_channels(z, c, 2 * c))
    o_t = sigmoid(slice_channels(z, 2 * c, 3 * c))
    candidate = tanh(slice_channels(z, 3 * c, 4 * c))
    cell_next = add(mul(f_t, state.cell), mul(i_t, candidate))
    h_next = mul(o_t, tanh(cell_next))
    return h_next, ConvLSTMState(h_next, cell_next)
