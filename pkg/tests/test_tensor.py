import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ravnet.errors import DeterminismError, DomainError, EmptyInputError, ShapeError, TapeError
from ravnet.gradcheck import gradcheck
from ravnet.tensor import (
    Tape,
    Tensor,
    _result,
    backward,
    clamp,
    concat_channels,
    div,
    elementwise,
    matmul,
    mul_scalar,
    no_grad,
    reduce,
    reshape_view,
    shift,
    slice_channels,
    softmax_axis,
    transpose_last2,
    zeros_like,
)

SEEDS = range(5)


def rand(rng, *dims, grad=True):
    return Tensor(rng.standard_normal(dims), requires_grad=grad)


def project(t, rng):
    """Random linear functional, avoids degenerate checks such as sum(softmax)."""
    return (t * Tensor(rng.standard_normal(t.dims))).sum()


# ---------------------------------------------------------------- elementwise


def test_sigmoid_of_zero_is_half():
    out = elementwise("sigmoid", Tensor(np.zeros((1, 2, 3, 3))))
    assert np.all(out.data == 0.5)


def test_add_zeros_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
    assert np.array_equal(elementwise("add", x, zeros_like(x)).data, x.data)


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("mul", Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))


def test_log_of_nonpositive_raises():
    with pytest.raises(DomainError):
        elementwise("log", Tensor([1.0, 0.0]))


def test_tanh_gradcheck_tight():
    rng = np.random.default_rng(3)
    x = rand(rng, 1, 2, 3, 3)
    rep = gradcheck(lambda x: project(x.tanh(), np.random.default_rng(9)), [x], eps=1e-4, tol=1e-5)
    assert rep.passed, rep.max_rel_err


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "relu", "sigmoid", "tanh", "log", "scale"])
@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradcheck(kind, seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 1, 4, 8, 8)
    b = rand(rng, 1, 4, 8, 8)
    if kind == "log":
        a.data = np.abs(a.data) + 0.5
    if kind == "div":
        b.data = np.sign(b.data) * (np.abs(b.data) + 0.5)
    if kind == "relu":
        a.data = np.sign(a.data) * (np.abs(a.data) + 1e-2)
    w = rng.standard_normal(a.dims)
    rep = gradcheck(lambda a, b: (elementwise(kind, a, b, k=1.7) * Tensor(w)).sum(), [a, b], tol=1e-4)
    assert rep.passed, rep.max_rel_err


# ---------------------------------------------------------------- structure


def test_matmul_identity_and_hand_value():
    m = Tensor(np.arange(9.0).reshape(3, 3))
    assert np.array_equal(matmul(Tensor(np.eye(3)), m).data, m.data)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    rep = gradcheck(lambda a, b: project(matmul(a, b), np.random.default_rng(seed)), [a, b], tol=1e-5)
    assert rep.passed, rep.max_rel_err


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)
    rep = gradcheck(lambda a, b: project(matmul(a, b), np.random.default_rng(1)), [a, b], tol=1e-5)
    assert rep.passed


def test_reshape_keeps_flat_order_and_round_trips():
    x = Tensor(np.arange(16.0).reshape(1, 4, 2, 2))
    y = reshape_view(x, (1, 4, 4))
    assert y.data.reshape(-1)[5] == x.data.reshape(-1)[5] == 5.0
    assert np.array_equal(reshape_view(y, x.dims).data, x.data)
    with pytest.raises(ShapeError):
        reshape_view(x, (3, 5))


def test_transpose_hand_value_and_round_trip():
    m = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    t = transpose_last2(m)
    assert t.data.tolist() == [[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]]
    assert np.array_equal(transpose_last2(t).data, m.data)


@pytest.mark.parametrize("seed", SEEDS)
def test_reshape_transpose_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 1, 4, 2, 3)
    f = lambda x: project(transpose_last2(reshape_view(x, (4, 6))), np.random.default_rng(seed))
    assert gradcheck(f, [x], tol=1e-5).passed


def test_concat_channels_contract():
    parts = [Tensor(np.full((1, 4, 8, 8), float(i))) for i in range(4)]
    out = concat_channels(parts)
    assert out.dims == (1, 16, 8, 8)
    assert out.data[0, 5, 0, 0] == 1.0
    assert concat_channels(parts[:1]) is parts[0]
    with pytest.raises(EmptyInputError):
        concat_channels([])
    with pytest.raises(ShapeError):
        concat_channels([parts[0], Tensor(np.ones((1, 4, 4, 8)))])


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_and_slice_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 1, 2, 4, 4), rand(rng, 1, 3, 4, 4)
    f = lambda a, b: project(slice_channels(concat_channels([a, b]), 1, 4), np.random.default_rng(seed))
    assert gradcheck(f, [a, b], tol=1e-5).passed


def test_reduce_values_and_gradient():
    assert reduce("sum", Tensor(np.ones((1, 1, 2, 2)))).item() == 4.0
    assert reduce("mean", Tensor([2.0, 4.0])).item() == 3.0
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce("sum", x))
    assert np.array_equal(x.grad, np.ones(x.dims))


@pytest.mark.parametrize("seed", SEEDS)
def test_reduce_mean_gradcheck(seed):
    x = rand(np.random.default_rng(seed), 1, 4, 8, 8)
    assert gradcheck(lambda x: reduce("mean", x * x), [x], tol=1e-4).passed


def test_softmax_hand_values():
    u = softmax_axis(Tensor(np.zeros((1, 4))), axis=1)
    assert np.allclose(u.data, 0.25, atol=1e-15)
    s = softmax_axis(Tensor([[0.0, math.log(3.0)]]), axis=1)
    assert np.allclose(s.data, [[0.25, 0.75]], atol=1e-15)


def test_softmax_large_logits_are_stable():
    s = softmax_axis(Tensor([[1000.0, 1000.0], [0.0, 1e4]]), axis=0)
    assert np.all(np.isfinite(s.data))
    assert np.allclose(s.data.sum(axis=0), 1.0)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DomainError):
        softmax_axis(Tensor([[np.inf, 0.0]]), axis=1)


@given(arrays(np.float64, (5, 4), elements=st.floats(-50, 50)), st.sampled_from([0, 1]))
@settings(max_examples=50, deadline=None)
def test_softmax_is_a_distribution(logits, axis):
    out = softmax_axis(Tensor(logits), axis).data
    assert np.all(out > 0)
    assert np.allclose(out.sum(axis=axis), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradcheck(seed):
    x = rand(np.random.default_rng(seed), 3, 3)
    f = lambda x: project(softmax_axis(x, 0), np.random.default_rng(seed + 10))
    assert gradcheck(f, [x], tol=1e-5).passed


@pytest.mark.parametrize("seed", SEEDS)
def test_clamp_shift_mul_scalar_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.05, 0.95, (1, 2, 4, 4)), requires_grad=True)
    s = Tensor([0.7], requires_grad=True)
    f = lambda x, s: project(shift(mul_scalar(clamp(x, 0.0, 1.0), s), 2.0), np.random.default_rng(seed))
    assert gradcheck(f, [x, s], tol=1e-5).passed


# ---------------------------------------------------------------- backward / tape


def test_backward_square():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce("sum", x * x))
    assert x.grad.tolist() == [4.0]


def test_backward_is_additive():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        tape.backward(reduce("sum", x + x))
    assert np.array_equal(x.grad, np.full(x.dims, 2.0))


def test_unreachable_tensor_keeps_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        _ = y * y
        tape.backward(reduce("sum", x * x))
    assert y.grad is None
    assert x.grad is not None


def test_backward_errors():
    with pytest.raises(ShapeError):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(x * x)
    with pytest.raises(TapeError):
        backward(Tensor([1.0], requires_grad=True))


def test_tape_is_freed_after_backward():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce("sum", x * x)
        assert len(tape) == 2
        tape.backward(loss)
        assert len(tape) == 0
    with pytest.raises(TapeError):
        backward(loss)


def test_tape_is_topological():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = (x * x).sigmoid().tanh()
        z = reduce("mean", y + x)
        ids = {id(n.out): n.index for n in tape.nodes}
        for node in tape.nodes:
            for inp in node.inputs:
                if id(inp) in ids:
                    assert ids[id(inp)] < node.index
        tape.backward(z)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape, no_grad():
        y = x * x
        assert len(tape) == 0
    assert not y.requires_grad


def test_cross_tape_use_is_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        y = x * x
        with Tape():
            with pytest.raises(TapeError):
                _ = y * y


def test_same_inputs_same_outputs():
    rng = np.random.default_rng(1)
    data = rng.standard_normal((1, 4, 8, 8))
    f = lambda: reduce("mean", Tensor(data).tanh() * Tensor(data).sigmoid()).item()
    assert f() == f()


# ---------------------------------------------------------------- gradcheck oracle


def test_gradcheck_on_sum_is_exact_for_dyadic_points():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
    rep = gradcheck(lambda x: reduce("sum", x), [x], eps=2.0 ** -10)
    assert rep.max_rel_err == 0.0


def test_gradcheck_on_sum_random_input():
    x = rand(np.random.default_rng(0), 1, 2, 4, 4)
    assert gradcheck(lambda x: reduce("sum", x), [x]).max_rel_err < 1e-9


def test_gradcheck_mean_sigmoid():
    x = rand(np.random.default_rng(4), 1, 2, 4, 4)
    assert gradcheck(lambda x: reduce("mean", x.sigmoid()), [x], eps=1e-4, tol=1e-4).passed


def _bad_square(x):
    # forward x^2 with a deliberately wrong backward (3x instead of 2x)
    return _result("bad_square", x.data ** 2, (x,), lambda g: (g * 3 * x.data,))


def test_gradcheck_catches_wrong_backward():
    x = rand(np.random.default_rng(0), 1, 1, 3, 3)
    rep = gradcheck(lambda x: reduce("sum", _bad_square(x)), [x])
    assert not rep.passed
    assert rep.max_rel_err > 0.1


def test_gradcheck_detects_nondeterminism():
    rng = np.random.default_rng(0)
    x = rand(rng, 1, 1, 2, 2)
    with pytest.raises(DeterminismError):
        gradcheck(lambda x: reduce("sum", x * Tensor(rng.standard_normal(x.dims))), [x])


def test_div_by_zero_raises():
    with pytest.raises(DomainError):
        div(Tensor([1.0]), Tensor([0.0]))
