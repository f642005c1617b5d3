import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmae import tensor as tn
from skelmae.tensor import Tensor, backward, finite_diff_grad, relative_error

H = 1e-5


def gradcheck(f, x: np.ndarray, tol: float = 1e-4) -> float:
    """Rel. error between backward() and central differences for scalar f."""
    t = Tensor(x, requires_grad=True)
    backward(f(t))
    numeric = finite_diff_grad(f, Tensor(x), H)
    err = relative_error(t.grad, numeric)
    assert err < tol, err
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((a @ b).data, [[3, 4], [5, 6]])


def test_matmul_hand_arithmetic():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_is_ones_times_b_transposed(rng):
    b = rng.uniform(-1, 1, (3, 4))
    a = rng.uniform(-1, 1, (2, 3))
    expected = np.ones((2, 4)) @ b.T
    at = Tensor(a, requires_grad=True)
    backward((at @ Tensor(b)).sum())
    np.testing.assert_allclose(at.grad, expected, rtol=1e-12)
    numeric = finite_diff_grad(lambda x: (x @ Tensor(b)).sum(), Tensor(a), 1e-6)
    assert relative_error(expected, numeric) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tn.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))
    with pytest.raises(tn.ShapeError, match="batch"):
        Tensor(np.ones((2, 2, 3))) @ Tensor(np.ones((3, 3, 4)))


def test_softmax_symmetric_and_stable():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    y = tn.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        tn.softmax(Tensor(np.ones((2, 3))), axis=2)


def test_softmax_jacobian(rng):
    x = rng.uniform(-1, 1, (3, 5))
    w = rng.uniform(-1, 1, (3, 5))
    gradcheck(lambda t: (tn.softmax(t, axis=1) * Tensor(w)).sum(), x, 1e-5)
    gradcheck(lambda t: (tn.softmax(t, axis=0) * Tensor(w)).sum(), x, 1e-5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(values):
    y = tn.softmax(Tensor(values)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12


def test_layer_norm_constant_input_gives_bias():
    x = Tensor(np.full((2, 4), 3.7))
    bias = Tensor([0.1, -0.2, 0.3, 0.4])
    y = tn.layer_norm(x, Tensor([5.0, 6.0, 7.0, 8.0]), bias)
    np.testing.assert_allclose(y.data, np.tile(bias.data, (2, 1)))


def test_layer_norm_two_values_closed_form():
    eps = 1e-5
    y = tn.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps).data
    # mean 2, variance 1: (x - 2) / sqrt(1 + eps)
    expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + eps)
    np.testing.assert_allclose(y[0], expected, rtol=1e-14)


def test_layer_norm_shape_error():
    with pytest.raises(tn.ShapeError):
        tn.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


def test_layer_norm_gradients(rng):
    x = rng.uniform(-1, 1, (4, 6))
    g = rng.uniform(-1, 1, 6)
    b = rng.uniform(-1, 1, 6)
    w = rng.uniform(-1, 1, (4, 6))
    gradcheck(lambda t: (tn.layer_norm(t, Tensor(g), Tensor(b)) * Tensor(w)).sum(), x, 1e-5)
    gradcheck(lambda t: (tn.layer_norm(Tensor(x), t, Tensor(b)) * Tensor(w)).sum(), g, 1e-5)
    gradcheck(lambda t: (tn.layer_norm(Tensor(x), Tensor(g), t) * Tensor(w)).sum(), b, 1e-5)


def test_backward_sum_and_square(rng):
    x = rng.uniform(-1, 1, (3, 2))
    t = Tensor(x, requires_grad=True)
    backward(t.sum())
    np.testing.assert_array_equal(t.grad, np.ones_like(x))
    t = Tensor(x, requires_grad=True)
    backward((t * t).sum())
    np.testing.assert_allclose(t.grad, 2 * x)


def test_backward_accumulates_until_zeroed(rng):
    x = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, np.full(4, 6.0))
    x.zero_grad()
    backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, np.full(4, 3.0))


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_backward_populates_every_reachable_tensor(rng):
    a = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
    h = tn.gelu(a)
    loss = (h * h).sum()
    backward(loss)
    assert a.grad is not None and h.grad is not None and loss.grad is not None


def test_composite_three_ops(rng):
    w = rng.uniform(-1, 1, (3, 4))
    gradcheck(lambda t: tn.tensor_mean(tn.gelu(t @ Tensor(w)) * tn.exp(t @ Tensor(w))), rng.uniform(-1, 1, (2, 3)))


def test_finite_diff_trivial_cases(rng):
    x = Tensor(rng.uniform(-1, 1, 5))
    np.testing.assert_allclose(finite_diff_grad(lambda t: t.sum(), x, H), np.ones(5), rtol=1e-9)
    assert finite_diff_grad(lambda t: (t * t).sum(), Tensor([3.0]), H)[0] == pytest.approx(6.0, rel=1e-9)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: t.sum(), x, 0.0)


def test_finite_diff_agrees_with_backward_on_quadratic_forms(rng):
    for _ in range(5):
        A = rng.uniform(-1, 1, (4, 4))
        f = lambda t: (t.reshape(1, 4) @ Tensor(A) @ t.reshape(4, 1)).sum()
        gradcheck(f, rng.uniform(-1, 1, 4))


ELEMENTWISE = {
    "add": lambda t, c: t + Tensor(c),
    "sub": lambda t, c: Tensor(c) - t,
    "mul": lambda t, c: t * Tensor(c),
    "neg": lambda t, c: -t,
    "scale": lambda t, c: t * 2.5,
    "shift": lambda t, c: 1.5 - t,
    "exp": lambda t, c: tn.exp(t),
    "log": lambda t, c: tn.log(t + 2.0),
    "square": lambda t, c: tn.square(t),
    "relu": lambda t, c: tn.relu(t),
    "gelu": lambda t, c: tn.gelu(t),
    "log_softmax": lambda t, c: tn.log_softmax(t, axis=-1),
    "reshape": lambda t, c: t.reshape(3, 4),
    "transpose": lambda t, c: t.transpose(1, 0),
    "take": lambda t, c: tn.take(t, [0, 2, 2, 1], axis=0),
    "take_axis1": lambda t, c: tn.take(t, [3, 0, 3], axis=1),
    "concatenate": lambda t, c: tn.concatenate([t, Tensor(c), t], axis=1),
    "sum_axis": lambda t, c: t.sum(axis=0, keepdims=True),
    "mean_axis": lambda t, c: t.mean(axis=1),
    "bias_broadcast": lambda t, c: tn.add(Tensor(c), tn.take(t, [1], 0).reshape(4)),
    "linear": lambda t, c: tn.linear(t, Tensor(c.T[:, :2]), Tensor([0.1, 0.2])),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_primitive_gradients(name, rng):
    x = rng.uniform(-1, 1, (3, 4))
    for_mix = rng.uniform(-1, 1, (3, 4))
    op = ELEMENTWISE[name]
    weight = rng.uniform(-1, 1, op(Tensor(x), for_mix).shape)
    gradcheck(lambda t: (op(t, for_mix) * Tensor(weight)).sum(), x)


def test_batched_matmul_gradients(rng):
    a = rng.uniform(-1, 1, (2, 3, 4))
    b = rng.uniform(-1, 1, (2, 4, 5))
    w = rng.uniform(-1, 1, (2, 3, 5))
    gradcheck(lambda t: ((t @ Tensor(b)) * Tensor(w)).sum(), a)
    gradcheck(lambda t: ((Tensor(a) @ t) * Tensor(w)).sum(), b)
    shared = rng.uniform(-1, 1, (4, 5))
    gradcheck(lambda t: ((Tensor(a) @ t) * Tensor(w)).sum(), shared)


def test_broadcast_rules():
    tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(tn.ShapeError):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_operations_do_not_mutate_inputs(rng):
    x = rng.uniform(-1, 1, (3, 4))
    keep = x.copy()
    t = Tensor(x, requires_grad=True)
    for name, op in ELEMENTWISE.items():
        out = op(t, keep)
        backward((out * out).sum())
    np.testing.assert_array_equal(t.data, keep)
    np.testing.assert_array_equal(x, keep)


def test_forward_is_deterministic(rng):
    x = rng.uniform(-1, 1, (5, 6))
    f = lambda: tn.layer_norm(tn.gelu(Tensor(x)), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_array_equal(f(), f())
