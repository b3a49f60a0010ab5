import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from decoupled_swarm import tensor as T
from decoupled_swarm.tensor import AdamState, NonFiniteError, ParameterSet, ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# --- forward values -------------------------------------------------------

def test_softmax_of_zero_logits_is_uniform():
    out = T.channel_softmax(Tensor(np.zeros((2, 3, 3))))
    np.testing.assert_array_equal(out.data, 0.5)


def test_identity_conv_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, a.data)


def test_conv_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_batched_conv_equals_per_sample():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 4, 4))
    w = rng.normal(size=(5, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w)).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], T.conv2d(Tensor(x[n]), Tensor(w)).data, atol=1e-12)


def test_maxpool_and_upsample():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(T.maxpool2(Tensor(x)).data, [[[5, 7], [13, 15]]])
    up = T.upsample_nearest2(Tensor(np.array([[[1.0, 2.0]]]))).data
    np.testing.assert_array_equal(up, [[[1, 1, 2, 2], [1, 1, 2, 2]]])


# --- backward -------------------------------------------------------------

def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_dead_relu_has_zero_gradient():
    x = leaf(-5.0)
    T.backward(T.relu(x))
    assert x.grad == 0.0


def test_softplus_gradient_at_zero():
    x = leaf(0.0)
    T.backward(T.softplus(x))
    assert x.grad == pytest.approx(0.5, abs=1e-15)


def test_diamond_graph_accumulates_both_paths():
    x = leaf(3.0)
    T.backward(x * x + x * x)
    assert x.grad == 12.0


def test_non_scalar_root_rejected():
    with pytest.raises(ShapeError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_tape_is_topological():
    x = leaf([1.0, 2.0])
    y = T.exp(x)
    root = T.sum(y * x)
    tape = T.Tape.from_root(root)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert len(pos) == len(tape.nodes)


def test_pow_gradient_clamped_at_zero():
    x = leaf([0.0, 0.25])
    T.backward(T.sum(T.pow(x, 0.7)))
    assert x.grad[0] == 0.0
    assert x.grad[1] == pytest.approx(0.7 * 0.25 ** -0.3)


# --- errors ---------------------------------------------------------------

def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor([0.0]))


# --- grad_check -----------------------------------------------------------

def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(3).normal(size=6))
    assert T.grad_check(lambda t: T.sum(t * t), x, 1e-5) < 1e-6


def test_grad_check_rejects_nondeterministic_f():
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError, match="deterministic"):
        T.grad_check(lambda t: T.sum(t * rng.normal()), Tensor([1.0]), 1e-5)


def test_grad_check_detects_wrong_conv_gradient(monkeypatch):
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 4, 4)))
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    real = T.conv2d

    def broken(x, w, b=None):
        out = real(x, w, b)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: tuple(None if p is None else 1.5 * p for p in inner(g))
        return out

    monkeypatch.setattr(T, "conv2d", broken)
    assert T.grad_check(lambda a, b: T.sum(T.conv2d(a, b) ** 2), [x, w]) > 1e-2


# --- Adam -----------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    ps = ParameterSet([("w", Tensor([1.5]))])
    ps["w"].grad = np.zeros(1)
    T.adam_step(ps, AdamState())
    assert ps["w"].data[0] == 1.5
    assert ps["w"].grad is None


def test_adam_first_step_moves_by_lr():
    ps = ParameterSet([("w", Tensor([0.0]))])
    ps["w"].grad = np.ones(1)
    T.adam_step(ps, AdamState(lr=1e-3))
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert ps["w"].data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_descends():
    ps = ParameterSet([("w", Tensor([0.0]))])
    state = AdamState(lr=1e-2)
    for _ in range(50):
        ps["w"].grad = np.array([-2.0])
        T.adam_step(ps, state)
    assert ps["w"].data[0] > 0.4
    assert state.step == 50


def test_adam_missing_grad_names_parameter():
    ps = ParameterSet([("enc.w", Tensor([0.0]))])
    with pytest.raises(ValueError, match="enc.w"):
        T.adam_step(ps, AdamState())


# --- ParameterSet serialisation -------------------------------------------

def test_parameter_set_round_trip():
    rng = np.random.default_rng(5)
    ps = ParameterSet([("a", Tensor(rng.normal(size=(2, 3)))), ("b", Tensor(rng.normal(size=4)))])
    blob = ps.to_bytes()
    back = ParameterSet.from_bytes(blob)
    assert back.schema() == ps.schema()
    np.testing.assert_array_equal(back.flat(), ps.flat())
    assert blob.endswith(ps.flat().astype("<f8").tobytes())


# --- properties -----------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 2), elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(logits):
    out = T.channel_softmax(Tensor(logits)).data
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(out >= 0) and np.all(out <= 1)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_add_mul_gradients(a, b):
    x, y = leaf(a), leaf(b)
    T.backward(x * y + x)
    assert x.grad == pytest.approx(b + 1)
    assert y.grad == pytest.approx(a)
