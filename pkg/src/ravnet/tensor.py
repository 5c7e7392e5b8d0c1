"""
Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records one node on the active :class:`Tape`. A node
keeps its inputs, its output and a closure mapping the output gradient to
input gradients. ``backward`` walks the tape once in reverse order.

Arrays are row-major; 4-D tensors use the N, C, H, W layout. Matrix ops
(``matmul``, ``transpose_last2``, ``softmax_axis``) work on 2-D views and on
batched 3-D views.
"""

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, EmptyInputError, ShapeError, TapeError


class Node:
    __slots__ = ("index", "op", "inputs", "out", "backward", "tape")

    def __init__(self, index, op, inputs, out, backward, tape):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of the ops of one forward pass.

    Use as a context manager to scope recording; the tape is freed when
    ``backward`` finishes or the block exits.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)
        self.clear()
        return False

    def record(self, op, inputs, out, backward):
        node = Node(len(self.nodes), op, tuple(inputs), out, backward, self)
        self.nodes.append(node)
        out.node = node
        return node

    def clear(self):
        # detach outputs so a freed tape cannot be walked again
        for node in self.nodes:
            if node.out.node is node:
                node.out.node = None
            node.tape = None
        self.nodes = []

    def backward(self, loss: "Tensor"):
        backward(loss)


class _State:
    def __init__(self):
        self.tapes: list[Tape] = []
        self.default = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tapes[-1] if _state.tapes else _state.default


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """A real-valued array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def dims(self) -> tuple:
        return self.data.shape

    shape = dims

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> Optional[int]:
        return None if self.node is None else self.node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.dtype}{flag})"

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.full(self.dims, other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def log(self):
        return log(self)

    def sum(self):
        return reduce("sum", self)

    def mean(self):
        return reduce("mean", self)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape_view(self, dims)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if not _state.grad_enabled or not any(t.requires_grad for t in inputs):
        return out
    tape = current_tape()
    for t in inputs:
        if t.node is not None and t.node.tape is not tape:
            raise TapeError(f"input of '{op}' was recorded on a different tape")
    out.requires_grad = True
    tape.record(op, inputs, out, backward)
    return out


def _check_same(op, a: Tensor, b: Tensor):
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: zero in denominator")
    out = ad / bd
    return _result("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return _result("scale", a.data * k, (a,), lambda g: (g * k,))


def shift(a: Tensor, k: float) -> Tensor:
    """Add a constant to every element."""
    k = a.dtype.type(k)
    return _result("shift", a.data + k, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    half = a.dtype.type(0.5)
    out = half * (1 + np.tanh(half * a.data))
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def log(a: Tensor) -> Tensor:
    if np.any(~(a.data > 0)):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _result("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.dtype)
    return _result("clamp", out, (a,), lambda g: (g * inside,))


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ShapeError(f"mul_scalar: scalar operand has dims {s.dims}")
    sv = s.data.reshape(())
    ad = a.data

    def backward(g):
        return g * sv, np.sum(g * ad, dtype=s.dtype).reshape(s.dims)

    return _result("mul_scalar", ad * sv, (a, s), backward)


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None, k: Optional[float] = None) -> Tensor:
    """Dispatch one of the named elementwise kinds."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, k)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D views, or batched product of 3-D views."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported dims {a.dims} @ {b.dims}")
    if a.dims[-1] != b.dims[-2] or (a.ndim == 3 and a.dims[0] != b.dims[0]):
        raise ShapeError(f"matmul: inner dims disagree, {a.dims} @ {b.dims}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result("matmul", ad @ bd, (a, b), backward)


def reshape_view(t: Tensor, dims) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if math.prod(dims) != t.size:
        raise ShapeError(f"reshape: cannot view {t.dims} as {dims}")
    src = t.dims
    return _result("reshape", t.data.reshape(dims), (t,), lambda g: (g.reshape(src),))


def transpose_last2(t: Tensor) -> Tensor:
    if t.ndim < 2:
        raise ShapeError("transpose_last2 needs at least 2 dims")
    out = np.ascontiguousarray(np.swapaxes(t.data, -1, -2))
    return _result("transpose", out, (t,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    ts = list(ts)
    if not ts:
        raise EmptyInputError("concat_channels of an empty sequence")
    if len(ts) == 1:
        return ts[0]
    n, _, h, w = ts[0].dims
    for t in ts:
        if t.ndim != 4 or (t.dims[0], t.dims[2], t.dims[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.dims} does not match n,h,w = {(n, h, w)}")
    offsets = np.cumsum([0] + [t.dims[1] for t in ts])

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return _result("concat", np.concatenate([t.data for t in ts], axis=1), ts, backward)


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= t.dims[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {t.dims}")
    src = t.dims

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result("slice", t.data[:, start:stop], (t,), backward)


def reduce(kind: str, t: Tensor) -> Tensor:
    src, dtype = t.dims, t.dtype
    if kind == "sum":
        out = np.sum(t.data).reshape(1)
        return _result("sum", out, (t,), lambda g: (np.full(src, g.reshape(()), dtype=dtype),))
    if kind == "mean":
        inv = dtype.type(1.0 / t.size)
        out = np.mean(t.data).reshape(1)
        return _result("mean", out, (t,), lambda g: (np.full(src, g.reshape(()) * inv, dtype=dtype),))
    raise ValueError(f"unknown reduction {kind!r}")


def softmax_axis(t: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    if not np.all(np.isfinite(t.data)):
        raise DomainError("softmax_axis: non-finite input")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result("softmax", out, (t,), backward)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor):
    """Propagate d(loss)/d(.) to every reachable tensor that requires grad.

    Leaf gradients accumulate into ``.grad``; the tape is freed afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    node = loss.node
    if node is None or node.tape is None:
        raise TapeError("loss is not recorded on a live tape")
    tape = node.tape
    grads = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(nd.out), None)
        if g is None:
            continue
        nd.out.grad = g
        for inp, gi in zip(nd.inputs, nd.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    tape.clear()
