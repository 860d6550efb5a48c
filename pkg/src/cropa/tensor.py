"""Dense float64 tensors with a reverse-mode tape.

A :class:`Graph` wraps a function written in terms of the primitives below.
:func:`forward` runs it while recording one node per primitive application;
:func:`backward` replays the record in reverse, accumulating vector-Jacobian
products.  Tensors that were not created inside the recorded run (model
weights, clean images) act as constants.

Example::

    g = Graph(lambda x: sum(mul(x, x)))
    forward(g, {"x": Tensor([3.0], requires_grad=True)})
    backward(g)["x"]          # array([6.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PRIMITIVES = (
    "add",
    "subtract",
    "elementwise-multiply",
    "scalar-multiply",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "mean",
    "sum",
    "tanh",
    "softmax",
    "log",
    "exp",
    "cross-entropy-with-logits",
    "cosine-similarity",
    "squared-L2-distance",
)

COS_EPS = 1e-12


class ShapeError(ValueError):
    """A primitive received operands of incompatible shapes."""

    def __init__(self, op: str, node: int, shapes: Sequence[tuple[int, ...]]):
        self.op = op
        self.node = node
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"node {node} ({op}): incompatible shapes {self.shapes}")


class GraphError(RuntimeError):
    pass


def primitive_set() -> list[str]:
    return list(PRIMITIVES)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None


@dataclass
class Graph:
    """A function over named Tensors plus the node record of its last run."""

    fn: Callable[..., Tensor]
    nodes: list[Node] = field(default_factory=list)
    input_ids: dict[str, int] = field(default_factory=dict)
    output: Tensor | None = None
    inputs: dict[str, Tensor] = field(default_factory=dict)

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if i >= len(self.nodes):
                raise GraphError(f"node {len(self.nodes)} references later node {i}")
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        node.output._node = idx
        return idx


_ACTIVE: list[Graph] = []


@contextlib.contextmanager
def _recording(graph: Graph):
    _ACTIVE.append(graph)
    try:
        yield graph
    finally:
        _ACTIVE.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, graph: Graph) -> bool:
    return t._node is not None and t._node < len(graph.nodes) and graph.nodes[t._node].output is t


def _emit(op: str, value: np.ndarray, args: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.grad = None
    out._node = None
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    if _ACTIVE:
        graph = _ACTIVE[-1]
        ids = tuple(a._node for a in args if _tracked(a, graph))
        if ids:
            # keep positional alignment between vjp outputs and tracked inputs
            mask = tuple(_tracked(a, graph) for a in args)

            def masked_vjp(g, _vjp=vjp, _mask=mask):
                grads = _vjp(g)
                return tuple(gr for gr, m in zip(grads, _mask) if m)

            graph._append(Node(op, ids, out, masked_vjp))
        out.requires_grad = bool(ids)
    return out


def _node_index() -> int:
    return len(_ACTIVE[-1].nodes) if _ACTIVE else -1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, _node_index(), [a.shape, b.shape]) from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit(
        "subtract", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("elementwise-multiply", a, b)
    ad, bd = a.data, b.data
    return _emit(
        "elementwise-multiply",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scalar-multiply", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", _node_index(), [a.shape, b.shape])
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _emit("matmul", ad @ bd, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", _node_index(), [a.shape, (len(axes),)])
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", _node_index(), [src, shape]) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", _node_index(), [t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    n = a.data.size if axis is None else src[axis]

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src) / n,)

    return _emit("mean", a.data.mean(axis=axis), (a,), vjp)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - primitive name
    a = _as_tensor(a)
    src = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", a.data.sum(axis=axis), (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``logits`` is (n, V) with ``targets`` a length-n int sequence, or (V,)
    with a single int target.
    """
    logits = _as_tensor(logits)
    x = logits.data
    single = x.ndim == 1
    if single:
        x = x[None, :]
        targets = [int(targets)]
    targets = np.asarray(targets, dtype=np.int64)
    if x.ndim != 2 or targets.shape != (x.shape[0],) or x.shape[0] == 0:
        raise ShapeError("cross-entropy-with-logits", _node_index(), [logits.shape, targets.shape])
    if np.any(targets < 0) or np.any(targets >= x.shape[1]):
        raise ValueError("target id out of range")
    rows = np.arange(x.shape[0])
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    loss = float(np.mean(lse - x[rows, targets]))
    p = e / s
    n = x.shape[0]

    def vjp(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return _emit("cross-entropy-with-logits", np.array(loss), (logits,), vjp)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of two equal-length vectors; 0 when either norm is below 1e-12."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine-similarity", _node_index(), [a.shape, b.shape])
    ad, bd = a.data, b.data
    na, nb = float(np.linalg.norm(ad)), float(np.linalg.norm(bd))
    if na < COS_EPS or nb < COS_EPS:
        return _emit("cosine-similarity", np.array(0.0), (a, b), lambda g: (np.zeros_like(ad), np.zeros_like(bd)))
    c = float(ad @ bd) / (na * nb)

    def vjp(g):
        ga = g * (bd / (na * nb) - c * ad / (na * na))
        gb = g * (ad / (na * nb) - c * bd / (nb * nb))
        return ga, gb

    return _emit("cosine-similarity", np.array(c), (a, b), vjp)


def sq_l2(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("squared-L2-distance", _node_index(), [a.shape, b.shape])
    d = a.data - b.data
    return _emit("squared-L2-distance", np.array(float(np.sum(d * d))), (a, b), lambda g: (2 * g * d, -2 * g * d))


# ------------------------------------------------------------ forward / back


def forward(graph: Graph, inputs: dict[str, Tensor]) -> Tensor:
    """Run ``graph.fn(**inputs)`` and record every primitive application."""
    graph.nodes = []
    graph.input_ids = {}
    graph.output = None
    graph.inputs = dict(inputs)
    with _recording(graph):
        for name, t in inputs.items():
            t.grad = None
            if t.requires_grad:
                graph.input_ids[name] = graph._append(Node("input", (), t))
        out = graph.fn(**inputs)
    if not isinstance(out, Tensor):
        raise GraphError("graph function must return a Tensor")
    graph.output = out
    return out


def backward(graph: Graph, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Fill ``grad`` on every requires_grad input; return them by name."""
    if graph.output is None:
        raise GraphError("backward called before forward")
    out = graph.output if output is None else output
    if out.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {out.shape}")
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    result: dict[str, np.ndarray] = {}
    if out._node is not None and _tracked(out, graph):
        grads[out._node] = np.ones_like(out.data)
        for idx in range(len(graph.nodes) - 1, -1, -1):
            g = grads[idx]
            node = graph.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                grads[src] = gi.copy() if grads[src] is None else grads[src] + gi
    for name, idx in graph.input_ids.items():
        t = graph.inputs[name]
        g = grads[idx]
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        result[name] = t.grad
    return result


def value_and_grad(fn: Callable[..., Tensor], inputs: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    g = Graph(fn)
    out = forward(g, inputs)
    return float(out.data), backward(g)


def grad_check(
    graph: Graph,
    inputs: dict[str, Tensor],
    wrt: str,
    step: float = 1e-4,
    components: Sequence[int] | None = None,
) -> float:
    """Max over components of |analytic - central| / max(|analytic|, |central|, 1e-12).

    ``components`` restricts the comparison to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    forward(graph, inputs)
    analytic = backward(graph)[wrt].reshape(-1).copy()
    target = inputs[wrt]
    base = target.data.copy()
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if components is None else np.asarray(components, dtype=np.int64)
    others = {k: Tensor(v.data) for k, v in inputs.items() if k != wrt}
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        vals = []
        for sgn in (1.0, -1.0):
            pert = flat.copy()
            pert[i] += sgn * step
            # probes only need values, so run unrecorded
            vals.append(float(graph.fn(**others, **{wrt: Tensor(pert.reshape(base.shape))}).data))
        numeric[j] = (vals[0] - vals[1]) / (2 * step)
    a = analytic[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(a - numeric) / denom))
