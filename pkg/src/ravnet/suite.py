"""
Registry of finite-difference gradient checks for every primitive op and
composite block, run in float64 over several seeds.

Fixtures draw non-zero biases, BN affine parameters, running statistics and
attention blend weights so that no pre-activation sits exactly on a ReLU
kink, which would make a central difference meaningless.
"""

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .arch import ARLstm, ARUpsample, ChannelAttention, CofRes, NetworkConfig, RAVNet
from .gradcheck import gradcheck
from .layers import BatchNorm2D, ConvLSTMCell, ParamStore, batchnorm, conv2d, maxpool2, upsample2_nearest
from .losses import bce_loss, dice_loss
from .tensor import (
    Tensor,
    add,
    clamp,
    concat_channels,
    div,
    log,
    matmul,
    mul,
    mul_scalar,
    reduce,
    relu,
    reshape_view,
    scale,
    shift,
    sigmoid,
    slice_channels,
    softmax_axis,
    sub,
    tanh,
    transpose_last2,
)

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
EPS = 1e-6
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
MODULES = ("tensor", "layers", "arch")
F64 = np.float64


@dataclass(frozen=True)
class Check:
    module: str
    name: str
    tol: float
    run: Callable  # seed -> GradcheckReport


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    seed: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


REGISTRY: list = []


def register(module: str, name: str, tol: float):
    def deco(fn):
        REGISTRY.append(Check(module, name, tol, fn))
        return fn
    return deco


def _leaf(rng, *dims, low=None, high=None) -> Tensor:
    if low is None:
        data = rng.standard_normal(dims)
    else:
        data = rng.uniform(low, high, dims)
    return Tensor(data, requires_grad=True, dtype=F64)


def _projector(rng, dims):
    """Scalar readout through fixed random weights; avoids symmetric cancellation."""
    w = Tensor(rng.standard_normal(dims), dtype=F64)
    return lambda t: t if t.dims == (1,) else reduce("sum", mul(t, w))


def randomize_fixture(store: ParamStore, rng):
    """Move biases, BN statistics and attention weights off their init values."""
    for name, p in store:
        if name.endswith(".bias") or name.endswith(".beta"):
            p.data = rng.normal(0.0, 0.3, p.dims).astype(p.dtype)
        elif name.endswith(".gamma"):
            p.data = rng.uniform(0.5, 1.5, p.dims).astype(p.dtype)
    for name, buf in store.buffers.items():
        if name.endswith("running_mean"):
            store.buffers[name] = rng.normal(0.0, 0.3, buf.shape).astype(buf.dtype)
        elif name.endswith("running_var"):
            store.buffers[name] = rng.uniform(0.5, 1.5, buf.shape).astype(buf.dtype)


def _check(f, inputs, tol):
    return gradcheck(f, inputs, eps=EPS, tol=tol)


def _unary(fn, low=None, high=None):
    def run(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, 3, 4, low=low, high=high)
        proj = _projector(rng, x.dims)
        return _check(lambda a: proj(fn(a)), [x], PRIMITIVE_TOL)
    return run


def _binary(fn, b_low=None, b_high=None):
    def run(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 3, 4, low=b_low, high=b_high)
        proj = _projector(rng, a.dims)
        return _check(lambda x, y: proj(fn(x, y)), [a, b], PRIMITIVE_TOL)
    return run


# ---------------------------------------------------------------- primitives

for _name, _fn in (("add", add), ("sub", sub), ("mul", mul)):
    register("tensor", _name, PRIMITIVE_TOL)(_binary(_fn))
register("tensor", "div", PRIMITIVE_TOL)(_binary(div, 0.5, 2.0))
register("tensor", "scale", PRIMITIVE_TOL)(_unary(lambda a: scale(a, -1.7)))
register("tensor", "shift", PRIMITIVE_TOL)(_unary(lambda a: shift(a, 0.3)))
register("tensor", "relu", PRIMITIVE_TOL)(_unary(relu))
register("tensor", "sigmoid", PRIMITIVE_TOL)(_unary(sigmoid))
register("tensor", "tanh", PRIMITIVE_TOL)(_unary(tanh))
register("tensor", "log", PRIMITIVE_TOL)(_unary(log, 0.2, 3.0))
register("tensor", "clamp", PRIMITIVE_TOL)(_unary(lambda a: clamp(a, -0.5, 0.7)))
register("tensor", "reduce_sum", PRIMITIVE_TOL)(_unary(lambda a: reduce("sum", mul(a, a))))
register("tensor", "reduce_mean", PRIMITIVE_TOL)(_unary(lambda a: reduce("mean", mul(a, a))))


@register("tensor", "mul_scalar", PRIMITIVE_TOL)
def _mul_scalar(seed):
    rng = np.random.default_rng(seed)
    x, s = _leaf(rng, 2, 3, 4), _leaf(rng, 1)
    proj = _projector(rng, x.dims)
    return _check(lambda a, k: proj(mul_scalar(a, k)), [x, s], PRIMITIVE_TOL)


@register("tensor", "matmul", PRIMITIVE_TOL)
def _matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    proj = _projector(rng, (2, 3, 5))
    return _check(lambda x, y: proj(matmul(x, y)), [a, b], PRIMITIVE_TOL)


@register("tensor", "reshape_transpose", PRIMITIVE_TOL)
def _reshape_transpose(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 3, 2, 2)
    proj = _projector(rng, (2, 4, 3))
    return _check(lambda a: proj(transpose_last2(reshape_view(a, (2, 3, 4)))), [x], PRIMITIVE_TOL)


@register("tensor", "concat_slice", PRIMITIVE_TOL)
def _concat_slice(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 1, 2, 3, 3), _leaf(rng, 1, 3, 3, 3)
    proj = _projector(rng, (1, 3, 3, 3))
    return _check(lambda x, y: proj(slice_channels(concat_channels([x, y]), 1, 4)), [a, b], PRIMITIVE_TOL)


@register("tensor", "softmax_axis", PRIMITIVE_TOL)
def _softmax(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 2, 4, 3)
    proj = _projector(rng, x.dims)
    return _check(lambda a: proj(softmax_axis(a, 1)), [x], PRIMITIVE_TOL)


# ---------------------------------------------------------------- layers


def _conv_check(k):
    def run(seed):
        rng = np.random.default_rng(seed)
        x, w, b = _leaf(rng, 2, 3, 5, 5), _leaf(rng, 4, 3, k, k), _leaf(rng, 4)
        proj = _projector(rng, (2, 4, 5, 5))
        return _check(lambda a, ww, bb: proj(conv2d(a, ww, bb)), [x, w, b], PRIMITIVE_TOL)
    return run


register("layers", "conv2d_1x1", PRIMITIVE_TOL)(_conv_check(1))
register("layers", "conv2d_3x3", PRIMITIVE_TOL)(_conv_check(3))


@register("layers", "maxpool2", PRIMITIVE_TOL)
def _maxpool(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 1, 2, 4, 6)
    proj = _projector(rng, (1, 2, 2, 3))
    return _check(lambda a: proj(maxpool2(a)), [x], PRIMITIVE_TOL)


@register("layers", "upsample2", PRIMITIVE_TOL)
def _upsample(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, 1, 2, 3, 2)
    proj = _projector(rng, (1, 2, 6, 4))
    return _check(lambda a: proj(upsample2_nearest(a)), [x], PRIMITIVE_TOL)


def _bn_check(mode):
    def run(seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        bn = BatchNorm2D(store, "bn", 3, F64)
        randomize_fixture(store, rng)
        x = _leaf(rng, 2, 3, 4, 4)
        proj = _projector(rng, x.dims)
        return _check(lambda a, g, b: proj(batchnorm(a, bn, mode)), [x, bn.gamma, bn.beta], COMPOSITE_TOL)
    return run


register("layers", "batchnorm_train", COMPOSITE_TOL)(_bn_check("train"))
register("layers", "batchnorm_infer", COMPOSITE_TOL)(_bn_check("infer"))


@register("layers", "convlstm_2step", COMPOSITE_TOL)
def _convlstm(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    cell = ConvLSTMCell(store, "lstm", 2, 3, rng, F64)
    randomize_fixture(store, rng)
    x1, x2 = _leaf(rng, 1, 2, 5, 5), _leaf(rng, 1, 2, 5, 5)
    proj = _projector(rng, (1, 3, 5, 5))

    def f(a, b, w, bias):
        _, state = cell(a)
        h, _ = cell(b, state)
        return proj(h)
    return _check(f, [x1, x2, cell.weight, cell.bias], COMPOSITE_TOL)


def _loss_check(loss_fn):
    def run(seed):
        rng = np.random.default_rng(seed)
        p = _leaf(rng, 1, 1, 4, 4, low=0.05, high=0.95)
        y = (rng.random((1, 1, 4, 4)) < 0.5).astype(F64)
        return _check(lambda a: loss_fn(a, y), [p], PRIMITIVE_TOL)
    return run


register("layers", "dice_loss", PRIMITIVE_TOL)(_loss_check(dice_loss))
register("layers", "bce_loss", PRIMITIVE_TOL)(_loss_check(bce_loss))


# ---------------------------------------------------------------- blocks


def _store_params(store, names):
    return [store[n] for n in names]


def _train_params(store):
    # a conv bias feeding train-mode BN is cancelled by the batch mean; its
    # gradient is exactly zero and a finite difference only sees roundoff
    return [p for n, p in store if not n.endswith(".conv.bias")]


@register("arch", "cofres", COMPOSITE_TOL)
def _cofres(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    block = CofRes(store, "enc", 2, 4, rng, F64)
    randomize_fixture(store, rng)
    x = _leaf(rng, 2, 2, 6, 6)
    proj_s, proj_p = _projector(rng, (2, 4, 6, 6)), _projector(rng, (2, 4, 3, 3))
    params = _train_params(store)

    def f(a, *_):
        skip, pooled = block(a, True)
        return add(proj_s(skip), proj_p(pooled))
    return _check(f, [x, *params], COMPOSITE_TOL)


@register("arch", "channel_attention", COMPOSITE_TOL)
def _ca(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    ca = ChannelAttention(store, "ca", F64)
    ca.beta.data = rng.normal(0.0, 0.5, (1,))
    x = Tensor(0.5 * rng.standard_normal((2, 3, 3, 3)), requires_grad=True, dtype=F64)
    proj = _projector(rng, x.dims)
    return _check(lambda a, b: proj(ca(a)), [x, ca.beta], COMPOSITE_TOL)


@register("arch", "ar_upsample", COMPOSITE_TOL)
def _ar_up(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    block = ARUpsample(store, "up", 8, rng, F64)
    randomize_fixture(store, rng)
    x = _leaf(rng, 2, 8, 3, 3)
    proj = _projector(rng, (2, 8, 6, 6))
    params = _train_params(store)
    return _check(lambda a, *_: proj(block(a, True)), [x, *params], COMPOSITE_TOL)


@register("arch", "ar_lstm", COMPOSITE_TOL)
def _ar_lstm(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    block = ARLstm(store, "fuse", 4, rng, F64)
    randomize_fixture(store, rng)
    skip, up = _leaf(rng, 1, 4, 4, 4), _leaf(rng, 1, 4, 4, 4)
    proj = _projector(rng, (1, 2, 4, 4))
    params = [p for _, p in store]
    return _check(lambda s, u, *_: proj(block(s, u, True)), [skip, up, *params], COMPOSITE_TOL)


@register("arch", "full_net", COMPOSITE_TOL)
def _full_net(seed):
    """Levels 2, base 4, inference-mode BN; input plus a few parameter groups."""
    rng = np.random.default_rng(seed)
    net = RAVNet(NetworkConfig(levels=2, base_channels=4), seed=seed, dtype=F64)
    randomize_fixture(net.store, rng)
    x = _leaf(rng, 1, 1, 8, 8)
    proj = _projector(rng, (1, 1, 8, 8))
    names = ["head.weight", "ca1.beta", "dec0.fuse.out.weight", "enc0.fuse.bias"]
    return _check(lambda a, *_: proj(net(a, training=False)), [x, *_store_params(net.store, names)], COMPOSITE_TOL)


# ---------------------------------------------------------------- runner


def select(module: str = "all") -> list:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; expected all or one of {MODULES}")
    return [c for c in REGISTRY if module == "all" or c.module == module]


def run_suite(module: str = "all", seeds: Iterable[int] = DEFAULT_SEEDS) -> list:
    out = []
    for check in select(module):
        for seed in seeds:
            rep = check.run(seed)
            out.append(CheckResult(check.module, check.name, seed, rep.max_rel_err, check.tol))
    return out


def summarize(results) -> list:
    """Worst error per check: ``(module, name, max_rel_err, tol, passed)``."""
    worst = {}
    for r in results:
        key = (r.module, r.name)
        if key not in worst or r.max_rel_err > worst[key].max_rel_err:
            worst[key] = r
    return [(r.module, r.name, r.max_rel_err, r.tol, all(x.passed for x in results if (x.module, x.name) == k))
            for k, r in worst.items()]


def format_table(results) -> str:
    lines = [f"{'module':<8} {'check':<20} {'max_rel_err':>12} {'tol':>8}  status"]
    for module, name, err, tol, ok in summarize(results):
        lines.append(f"{module:<8} {name:<20} {err:>12.3e} {tol:>8.0e}  {'ok' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
