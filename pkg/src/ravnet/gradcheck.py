"""Central finite-difference check of tape gradients."""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DeterminismError, ShapeError
from .tensor import Tape, Tensor, no_grad


@dataclass
class InputCheck:
    index: int
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    inputs: list = field(default_factory=list)
    tol: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.inputs)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of the largest gradient magnitude, so entries that are
    negligible next to the rest of the gradient are judged on that scale.
    """
    a = np.abs(analytic)
    n = np.abs(numeric)
    floor = max(1e-3 * max(a.max(initial=0.0), n.max(initial=0.0)), 1e-12)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"gradcheck: f must return a scalar, got {out.dims}")
    return float(out.data.reshape(-1)[0])


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Only inputs with ``requires_grad`` are checked. Their ``.grad`` is
    overwritten.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with no_grad():
        base = _scalar(f(*inputs))
        again = _scalar(f(*inputs))
    if base != again:
        raise DeterminismError(f"f is not deterministic: {base!r} != {again!r}")

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        tape.backward(f(*inputs))

    report = GradcheckReport(tol=tol)
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        numeric = np.zeros(t.size)
        flat = t.data.reshape(-1)
        with no_grad():
            for j in range(t.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = _scalar(f(*inputs))
                flat[j] = orig - eps
                fm = _scalar(f(*inputs))
                flat[j] = orig
                numeric[j] = (fp - fm) / (2 * eps)
        err = float(relative_error(analytic.reshape(-1), numeric).max(initial=0.0))
        report.inputs.append(InputCheck(i, err, err <= tol))
    return report
