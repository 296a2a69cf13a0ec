import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmdiff import tensor as T


def test_matmul_examples():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((a @ b).data, [[19, 22], [43, 50]])
    A = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal(T.matmul(np.eye(2), A).data, A)
    assert np.array_equal(T.matmul(A, np.zeros((2, 2))).data, np.zeros((2, 2)))


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(a, b).data, ref, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(T.softmax(np.full(5, 3.0)).data, 0.2)
    assert np.array_equal(T.softmax(np.array([[7.0]]), axis=1).data, [[1.0]])
    assert np.allclose(T.softmax(np.array([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)
    with pytest.raises(T.ShapeError):
        T.softmax(np.zeros((2, 0)), axis=1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(x, c):
    p = T.softmax(x, axis=-1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.allclose(T.softmax(x + c, axis=-1).data, p, atol=1e-12)


def test_backward_examples():
    x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward((x * x).sum())
    assert np.array_equal(x.grad, 2 * x.data)

    y = T.Tensor([1.0, 2.0], requires_grad=True)
    z = T.Tensor([3.0], requires_grad=True)
    T.backward((z * z).sum(), inputs=[y, z])
    assert np.array_equal(y.grad, [0.0, 0.0])

    with pytest.raises(T.ShapeError):
        T.backward(x * 2)


def test_no_grad_tensor_never_accumulates():
    c = T.Tensor([1.0, 2.0])
    x = T.Tensor([3.0, 4.0], requires_grad=True)
    T.backward((c * x).sum())
    assert c.grad is None
    assert np.array_equal(x.grad, [1.0, 2.0])


def test_three_layer_graph_matches_finite_differences():
    rng = np.random.default_rng(2)
    w1 = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w2 = T.Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    w3 = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    x = rng.normal(size=(2, 4))

    def f():
        h = T.tanh(T.matmul(x, w1))
        h = T.gelu(T.matmul(h, w2))
        return T.cross_entropy(T.matmul(h, w3), np.array([0, 2]))

    T.backward(f())
    for w in (w1, w2, w3):
        num = T.numerical_grad(lambda: f().item(), w, eps=1e-5)
        assert T.rel_error(w.grad, num) < 1e-6


# every differentiable op against central differences at float64
_UNARY = {
    "exp": T.exp, "log": lambda a: T.log(T.exp(a)), "sqrt": lambda a: T.sqrt(T.exp(a)),
    "tanh": T.tanh, "relu": lambda a: T.relu(a + 0.05), "gelu": T.gelu, "square": T.square,
    "softmax": lambda a: T.softmax(a, axis=-1), "log_softmax": lambda a: T.log_softmax(a, axis=-1),
    "sum": lambda a: T.tsum(a, axis=1, keepdims=True), "mean": lambda a: T.mean(a, axis=0),
    "reshape": lambda a: T.reshape(a, (6, 2)), "transpose": lambda a: T.transpose(a, (1, 0)),
    "swapaxes": lambda a: T.swapaxes(a, 0, 1), "getitem": lambda a: a[1:, ::2],
    "concat": lambda a: T.concat([a, a * 2.0], axis=1), "stack": lambda a: T.stack([a, a], axis=0),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_op_gradcheck(name):
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = rng.normal(size=_UNARY[name](T.Tensor(x.data)).shape)

    def f():
        return (_UNARY[name](x) * w).sum()

    T.backward(f())
    num = T.numerical_grad(lambda: f().item(), x)
    assert T.rel_error(x.grad, num) < 1e-5


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div, T.mse])
def test_binary_op_gradcheck(op):
    rng = np.random.default_rng(4)
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

    def f():
        return T.tsum(op(a, b))

    T.backward(f())
    for t in (a, b):
        assert T.rel_error(t.grad, T.numerical_grad(lambda: f().item(), t)) < 1e-5


def test_layer_norm_embedding_matmul_gradcheck():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    g = T.Tensor(rng.normal(size=4), requires_grad=True)
    b = T.Tensor(rng.normal(size=4), requires_grad=True)
    table = T.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    ids = np.array([[0, 5, 5], [2, 1, 0]])

    def f():
        h = T.layer_norm(x + T.embedding(table, ids), g, b)
        return T.tsum(T.tanh(T.matmul(h, w)))

    T.backward(f())
    for t in (x, g, b, table, w):
        assert T.rel_error(t.grad, T.numerical_grad(lambda: f().item(), t)) < 1e-5


def test_loss_primitives():
    a = np.random.default_rng(6).normal(size=(3, 2))
    assert T.mse(a, a).item() == 0.0
    assert T.mse(np.array([1.0, 2.0]), np.array([3.0, 5.0])).item() == 6.5
    for V in (2, 7, 50):
        assert math.isclose(T.cross_entropy(np.zeros(V), 1).item(), math.log(V), rel_tol=1e-12)
    with pytest.raises(T.ShapeError):
        T.mse(np.ones(2), np.ones(3))
    with pytest.raises(IndexError):
        T.cross_entropy(np.zeros(4), 4)


def test_broadcast_limited_to_leading_batch():
    with pytest.raises(T.ShapeError):
        T.add(np.ones((3, 4)), np.ones((3, 1)))
    assert T.add(np.ones((2, 3, 4)), np.ones(4)).shape == (2, 3, 4)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        w = T.Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        loss = T.mean(T.softmax(T.matmul(rng.normal(size=(3, 5)), w)) * rng.normal(size=(3, 5)))
        T.backward(loss)
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_float32_mode():
    with T.default_dtype("float32"):
        assert T.Tensor([1.0]).data.dtype == np.float32
    assert T.Tensor([1.0]).data.dtype == np.float64


def test_shared_node_visited_once():
    x = T.Tensor([2.0], requires_grad=True)
    y = x * x
    T.backward(y * y + y)     # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert np.allclose(x.grad, [36.0])
