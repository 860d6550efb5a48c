import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cropa import tensor as T
from cropa.rng import Rng
from cropa.tensor import Graph, GraphError, ShapeError, Tensor


def run(fn, **inputs):
    g = Graph(fn)
    out = T.forward(g, inputs)
    return g, out


def test_primitive_set_contents():
    prims = T.primitive_set()
    for name in ("matmul", "cosine-similarity", "squared-L2-distance", "cross-entropy-with-logits", "softmax"):
        assert name in prims
    assert len(prims) == 17


def test_softmax_of_zeros():
    _, out = run(lambda x: T.softmax(x), x=Tensor([0.0, 0.0]))
    assert np.array_equal(out.data, [0.5, 0.5])


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=10))
def test_self_cosine_is_one(v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-6:
        v[0] = 1.0
    _, out = run(lambda x: T.cosine_similarity(x, x), x=Tensor(v))
    assert abs(float(out.data) - 1.0) < 1e-12


def test_cross_entropy_value():
    # -log softmax([1,2,3])[2] = log(1 + e^-1 + e^-2)
    expected = math.log(1.0 + math.exp(-1.0) + math.exp(-2.0))
    assert abs(expected - 0.40760596444437) < 1e-12
    _, out = run(lambda x: T.cross_entropy(x, 2), x=Tensor([1.0, 2.0, 3.0]))
    assert abs(float(out.data) - expected) < 1e-15


def test_cross_entropy_gradient_matches_finite_differences():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    g, _ = run(lambda x: T.cross_entropy(x, 2), x=x)
    grad = T.backward(g)["x"]
    e = np.exp([1.0, 2.0, 3.0])
    assert np.max(np.abs(grad - (e / e.sum() - [0, 0, 1]))) < 1e-15
    fd = []
    for i in range(3):
        hi, lo = x.data.copy(), x.data.copy()
        hi[i] += 1e-4
        lo[i] -= 1e-4
        f = lambda v: float(T.cross_entropy(Tensor(v), 2).data)
        fd.append((f(hi) - f(lo)) / 2e-4)
    assert np.max(np.abs(grad - fd)) < 1e-6


def test_square_and_tanh_derivatives():
    g, _ = run(lambda x: T.sum(T.mul(x, x)), x=Tensor([3.0], requires_grad=True))
    assert T.backward(g)["x"][0] == 6.0
    g, _ = run(lambda x: T.sum(T.tanh(x)), x=Tensor([0.0], requires_grad=True))
    assert T.backward(g)["x"][0] == 1.0


def test_backward_errors():
    g = Graph(lambda x: T.sum(x))
    with pytest.raises(GraphError):
        T.backward(g)
    g, _ = run(lambda x: T.scale(x, 2.0), x=Tensor([1.0, 2.0], requires_grad=True))
    with pytest.raises(GraphError):
        T.backward(g)


def test_shape_error_names_node_and_shapes():
    with pytest.raises(ShapeError) as err:
        run(lambda a, b: T.matmul(a, b), a=Tensor(np.ones((2, 3))), b=Tensor(np.ones((2, 3))))
    assert err.value.shapes == ((2, 3), (2, 3))
    assert "matmul" in str(err.value)


def test_linear_graph_exact():
    w = np.arange(6.0).reshape(2, 3)
    g = Graph(lambda x: T.sum(T.matmul(Tensor(w), x)))
    x = Tensor(np.ones((3, 1)), requires_grad=True)
    assert T.grad_check(g, {"x": x}, "x", step=0.37) < 1e-10


def test_constant_graph_zero_gradient():
    g = Graph(lambda x: T.sum(Tensor([1.0, 2.0])))
    x = Tensor([0.5], requires_grad=True)
    T.forward(g, {"x": x})
    assert np.array_equal(T.backward(g)["x"], [0.0])
    assert T.grad_check(g, {"x": x}, "x") == 0.0


def test_graph_nodes_reference_earlier_nodes():
    g, _ = run(lambda x: T.sum(T.tanh(T.mul(x, x))), x=Tensor([0.3, 0.2], requires_grad=True))
    for i, node in enumerate(g.nodes):
        assert all(j < i for j in node.inputs)


def test_determinism_bit_identical():
    x = np.array([[0.1, -0.4], [0.7, 0.2]])
    outs = []
    for _ in range(2):
        g, out = run(lambda a: T.sum(T.softmax(T.matmul(a, T.transpose(a)))), a=Tensor(x, requires_grad=True))
        outs.append((out.data.tobytes(), T.backward(g)["a"].tobytes()))
    assert outs[0] == outs[1]


# every primitive through a scalar readout, checked over 100 seeds
def _primitive_cases(rng):
    r = lambda *s: np.array([rng.uniform(-1, 1) for _ in range(int(np.prod(s)))]).reshape(s)
    b = Tensor(r(3, 4))
    m = Tensor(r(4, 2))
    w = Tensor(r(3, 4))
    c = Tensor(r(6))
    readout = lambda y: T.sum(T.mul(y, Tensor(np.linspace(0.5, 1.5, y.data.size).reshape(y.shape))))
    return {
        "add": (lambda x: readout(T.add(x, b)), r(3, 4)),
        "subtract": (lambda x: readout(T.subtract(b, x)), r(3, 4)),
        "elementwise-multiply": (lambda x: readout(T.mul(x, b)), r(3, 4)),
        "scalar-multiply": (lambda x: readout(T.scale(x, -1.7)), r(3, 4)),
        "matmul": (lambda x: readout(T.matmul(x, m)), r(3, 4)),
        "transpose": (lambda x: readout(T.transpose(x)), r(3, 4)),
        "reshape": (lambda x: readout(T.reshape(x, (2, 6))), r(3, 4)),
        "concat": (lambda x: readout(T.concat([x, b], axis=0)), r(3, 4)),
        "mean": (lambda x: readout(T.mean(x, axis=0)), r(3, 4)),
        "sum": (lambda x: T.sum(T.mul(x, w)), r(3, 4)),
        "tanh": (lambda x: readout(T.tanh(x)), r(3, 4)),
        "softmax": (lambda x: readout(T.softmax(x)), r(3, 4)),
        "log": (lambda x: readout(T.log(x)), 1.5 + r(3, 4)),
        "exp": (lambda x: readout(T.exp(x)), r(3, 4)),
        "cross-entropy-with-logits": (lambda x: T.cross_entropy(x, [0, 3, 1]), r(3, 4)),
        "cosine-similarity": (lambda x: T.cosine_similarity(x, c), r(6)),
        "squared-L2-distance": (lambda x: T.sq_l2(x, b), r(3, 4)),
    }


@pytest.mark.parametrize("name", T.PRIMITIVES)
def test_primitive_gradients_over_100_seeds(name):
    through_softmax = name in ("softmax", "cross-entropy-with-logits")
    tol = 1e-3 if through_softmax else 1e-5
    worst = 0.0
    for seed in range(100):
        fn, x0 = _primitive_cases(Rng(seed))[name]
        worst = max(worst, T.grad_check(Graph(fn), {"x": Tensor(x0, requires_grad=True)}, "x", 1e-4))
    assert worst < tol


@given(st.lists(st.lists(st.floats(-30, 30), min_size=3, max_size=3), min_size=1, max_size=5))
def test_softmax_rows_sum_to_one(rows):
    out = T.softmax(Tensor(np.array(rows))).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(np.isfinite(out))


@given(st.integers(1, 4), st.integers(1, 4))
def test_tensor_shape_product(a, b):
    t = Tensor(np.zeros((a, b)))
    assert int(np.prod(t.shape)) == t.size


def test_grad_has_input_shape():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    g, _ = run(lambda x: T.sum(T.tanh(x)), x=x)
    T.backward(g)
    assert x.grad.shape == x.shape
