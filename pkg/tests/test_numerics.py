import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tibstream.numerics import (
    Adam, AdamState, CheckpointError, NumericError, ShapeError, Tape, Tensor, adam_step, add,
    backward, concat, cross_entropy, dropout, embedding, expand, grad_check, layer_norm,
    load_checkpoint, log_softmax, masked_softmax, matmul, mean, mul, no_grad, relu, reshape,
    save_checkpoint, scale, sigmoid, slice_, sum_, tanh, transpose,
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ------------------------------------------------------------------ forward examples

def test_sigmoid_at_zero():
    assert sigmoid(Tensor(0.0)).data == 0.5


def test_masked_softmax_single_unmasked_entry():
    out = masked_softmax(Tensor([1.0, 1.0]), np.array([True, False]))
    assert out.data.tolist() == [1.0, 0.0]


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(sum_(mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_sigmoid_at_zero():
    w = Tensor(0.0, requires_grad=True)
    backward(sigmoid(w))
    assert w.grad == 0.25


def test_backward_requires_scalar_root(rng):
    x = leaf(rng, 3)
    with pytest.raises(ShapeError):
        backward(tanh(x))


def test_gradients_accumulate_additively(rng):
    x = leaf(rng, 4)
    backward(sum_(tanh(x)))
    first = x.grad.copy()
    backward(sum_(tanh(x)))
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError) as exc:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert exc.value.op == "add"
    assert (2, 3) in exc.value.shapes and (3, 2) in exc.value.shapes


def test_no_implicit_trailing_broadcast():
    with pytest.raises(ShapeError):
        mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_leading_dim_broadcast_allowed(rng):
    a, b = leaf(rng, 5, 3), leaf(rng, 3)
    assert grad_check(lambda: sum_(mul(add(a, b), a)), [a, b]) < 1e-6


def test_nan_raises_numeric_error():
    with pytest.raises(NumericError):
        scale(Tensor([1.0]), float("inf"))


def test_no_grad_builds_no_tape(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = tanh(x)
    assert not y.requires_grad and y.is_leaf


def test_tape_is_in_execution_order(rng):
    x = leaf(rng, 3)
    a = tanh(x)
    b = sigmoid(a)
    c = sum_(mul(a, b))
    ops = [n.op for n in Tape.from_root(c)]
    assert ops.index("tanh") < ops.index("sigmoid") < ops.index("sum")


def test_backward_is_deterministic(rng):
    x, w = leaf(rng, 4, 3), leaf(rng, 3, 2)
    f = lambda: mean(tanh(matmul(x, w)))  # noqa: E731
    backward(f())
    g1 = w.grad.copy()
    w.zero_grad()
    backward(f())
    assert np.array_equal(g1, w.grad)


# ------------------------------------------------------------------ gradient checks

PRIMITIVES = {
    "matmul": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 4, 2)), lambda: sum_(mul(matmul(a, b), matmul(a, b)))),
    "batched_matmul": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 2, 4, 3)), lambda: sum_(tanh(matmul(a, b)))),
    "add_mul": lambda r: ((a := leaf(r, 3, 2)), (b := leaf(r, 3, 2)), lambda: sum_(mul(add(a, b), b))),
    "scale": lambda r: ((a := leaf(r, 4)), a, lambda: sum_(mul(scale(a, -2.5), a))),
    "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 2)), lambda: sum_(tanh(concat([a, b], 1)))),
    "slice": lambda r: ((a := leaf(r, 4, 5)), a, lambda: sum_(tanh(slice_(a, (slice(1, 3), slice(None, None, 2)))))),
    "reshape_transpose": lambda r: ((a := leaf(r, 2, 6)), a, lambda: sum_(mul(transpose(reshape(a, (3, 4))), Tensor(np.arange(12.0).reshape(4, 3))))),
    "expand": lambda r: ((a := leaf(r, 3, 1)), a, lambda: sum_(tanh(mul(expand(a, (3, 4)), Tensor(np.arange(12.0).reshape(3, 4)))))),
    "tanh": lambda r: ((a := leaf(r, 5)), a, lambda: sum_(tanh(a))),
    "sigmoid": lambda r: ((a := leaf(r, 5)), a, lambda: sum_(mul(sigmoid(a), a))),
    "relu": lambda r: ((a := Tensor(r.uniform(0.1, 1, 6) * r.choice([-1, 1], 6), True)), a, lambda: sum_(mul(relu(a), a))),
    "layer_norm": lambda r: ((a := leaf(r, 3, 5)), (g := leaf(r, 5)), (lambda b=Tensor(r.normal(size=5)): sum_(mul(layer_norm(a, g, b), Tensor(np.arange(15.0).reshape(3, 5)))))),
    "embedding": lambda r: ((t := leaf(r, 4, 3)), t, lambda: sum_(tanh(embedding(t, np.array([[0, 2], [2, 3]]))))),
    "masked_softmax": lambda r: ((a := leaf(r, 3, 4)), a, lambda: sum_(mul(masked_softmax(a, np.array([[1, 1, 0, 1], [0, 1, 0, 0], [1, 1, 1, 1]], bool)), Tensor(np.arange(12.0).reshape(3, 4))))),
    "log_softmax": lambda r: ((a := leaf(r, 3, 4)), a, lambda: sum_(mul(log_softmax(a), Tensor(np.arange(12.0).reshape(3, 4))))),
    "cross_entropy": lambda r: ((a := leaf(r, 2, 3, 5)), a, lambda: cross_entropy(log_softmax(a), np.array([[1, 4, 0], [2, 2, 3]]), np.array([[1, 1, 0.5], [1, 0, 1.0]]))),
    "mean_sum_axis": lambda r: ((a := leaf(r, 3, 4)), a, lambda: mean(mul(sum_(a, 1), sum_(a, 1)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check(name):
    a, b, f = PRIMITIVES[name](np.random.default_rng(7))
    params = [a] if a is b else [a, b]
    assert grad_check(f, params) < 1e-6


def test_grad_check_tanh_sum(rng):
    x = leaf(rng, 6)
    assert grad_check(lambda: sum_(tanh(x)), [x]) < 1e-6


def test_grad_check_constant_is_zero(rng):
    x = leaf(rng, 3)
    assert grad_check(lambda: sum_(Tensor(np.ones(3))), [x]) == 0.0


def test_grad_check_rejects_bad_step(rng):
    x = leaf(rng, 2)
    with pytest.raises(ValueError):
        grad_check(lambda: sum_(x), [x], h=1e-2)


def test_grad_check_rejects_non_finite(rng):
    x = leaf(rng, 2)
    with pytest.raises(NumericError):
        grad_check(lambda: Tensor(float("nan")), [x])


# ------------------------------------------------------------------ properties

@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
       hnp.arrays(bool, (3, 5)))
def test_masked_softmax_normalised_and_exact_zero(x, mask):
    out = masked_softmax(Tensor(x), mask).data
    assert np.all(out[~mask] == 0.0)
    for row, m in zip(out, mask):
        if m.any():
            assert math.isclose(row[m].sum(), 1.0, rel_tol=1e-12)
        else:
            assert np.all(row == 0.0)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 6), elements=st.floats(-50, 50)))
def test_log_softmax_rows_normalised(x):
    out = log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(-1), 1.0, rtol=1e-12)


def test_dropout_identity_without_rng(rng):
    x = Tensor(rng.normal(size=5))
    assert dropout(x, 0.5, None) is x


# ------------------------------------------------------------------ Adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), True)}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array(0.0), True)}
    state = adam_step(p, {"w": np.array(1.0)}, AdamState(lr=0.002))
    # m_hat = 1, v_hat = 1: update = lr / (1 + eps)
    assert p["w"].data == pytest.approx(-0.002 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_repeated_steps_monotone():
    p = {"w": Tensor(np.array(0.0), True)}
    state = AdamState()
    values = []
    for _ in range(3):
        adam_step(p, {"w": np.array(0.7)}, state)
        values.append(float(p["w"].data))
    assert values[0] > values[1] > values[2] and state.step == 3


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(2), True)}
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(3)}, AdamState())


def test_adam_wrapper_clips(rng):
    w = Tensor(np.zeros(3), True)
    opt = Adam({"w": w})
    backward(sum_(scale(w, 100.0)))
    norm = opt.step(clip=1.0)
    assert norm == pytest.approx(100 * math.sqrt(3))
    assert np.all(w.data < 0)


# ------------------------------------------------------------------ checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.w": rng.normal(size=(3, 4)), "b": np.array(2.5), "c": rng.normal(size=(2, 2, 2))}
    save_checkpoint(tmp_path / "m.ckpt", tensors)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k]) and back[k].shape == tensors[k].shape


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"x": np.array([1.0])})
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:5] == b"CSTM1"
    assert int.from_bytes(raw[5:9], "little") == 1
    assert raw[-8:] == np.array([1.0], "<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
