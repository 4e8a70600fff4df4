"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

A :class:`Graph` records every operation in insertion order.  Leaves are
created with :meth:`Graph.param` (named, differentiable) or
:meth:`Graph.constant`.  Operations are module-level functions that take
tensors from the same graph and return a new tensor registered on it.

    g = Graph()
    w = g.param("w", [3.0])
    loss = mse(w, g.constant([1.0]))
    grads = g.backward(loss)      # {"w": array([4.])}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """An immutable float64 array bound to a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id", "requires_grad")

    def __init__(self, data: np.ndarray, graph: "Graph", node_id: int, requires_grad: bool):
        data.flags.writeable = False
        self.data = data
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: Tensor | None = None
    backward_fn: BackwardFn | None = None
    name: str | None = None
    saved: dict = field(default_factory=dict)


class Graph:
    """Append-only record of operations; node order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves ---------------------------------------------------------
    def param(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._names:
            raise ValueError(f"parameter {name!r} already registered on this graph")
        node = Node("param", (), name=name)
        t = self._attach(node, _as_array(data), requires_grad)
        self._names[name] = t.node_id
        return t

    def constant(self, data) -> Tensor:
        return self._attach(Node("constant", ()), _as_array(data), False)

    def _attach(self, node: Node, data: np.ndarray, requires_grad: bool) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{node.kind}: non-finite values")
        t = Tensor(data, self, len(self.nodes), requires_grad)
        node.output = t
        self.nodes.append(node)
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward_fn: BackwardFn, **saved) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{kind}: operand belongs to a different graph")
        needs = any(t.requires_grad for t in inputs)
        node = Node(kind, tuple(t.node_id for t in inputs),
                    backward_fn=backward_fn if needs else None, saved=saved)
        t = Tensor(np.asarray(out, dtype=DTYPE), self, len(self.nodes), needs)
        node.output = t
        self.nodes.append(node)
        return t

    # -- reverse pass ---------------------------------------------------
    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every named parameter it reaches.

        Parameters the loss does not depend on get an all-zero entry.
        """
        if loss.graph is not self:
            raise ValueError("loss tensor belongs to a different graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            out = node.output
            g = grads.get(out.node_id)
            if g is None or node.backward_fn is None:
                continue
            in_grads = node.backward_fn(g)
            for nid, ig in zip(node.inputs, in_grads):
                if ig is None or not self.nodes[nid].output.requires_grad:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + ig
                else:
                    grads[nid] = ig
        result = {}
        for name, nid in self._names.items():
            node = self.nodes[nid]
            if not node.output.requires_grad:
                continue
            g = grads.get(nid)
            result[name] = np.zeros_like(node.output.data) if g is None else np.asarray(g, dtype=DTYPE)
        return result


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=DTYPE, copy=True)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- primitives ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return a.graph.record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_shape("elementwise_mul", a, b)
    return a.graph.record(
        "elementwise_mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.graph.record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a.graph.record("matmul", (a, b), out, backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.graph.record("transpose", (a,), np.transpose(a.data, axes),
                          lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return a.graph.record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (dropping that axis)."""
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return a.graph.record("take", (a,), out, backward)


def sum_all(a: Tensor) -> Tensor:
    return a.graph.record("sum", (a,), np.sum(a.data),
                          lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return a.graph.record("mean", (a,), np.sum(a.data) / n,
                          lambda g: (np.full(a.shape, float(g) / n),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return a.graph.record("gelu", (a,), x * cdf, lambda g: (g * (cdf + x * pdf),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return a.graph.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax_lastaxis: needs a non-empty last axis")
    y = _softmax(a.data)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return a.graph.record("softmax_lastaxis", (a,), y, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return table.graph.record("embedding_lookup", (table,), table.data[ids], backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.atleast_1d(np.asarray(labels))
    x = logits.data.reshape(-1, logits.shape[-1]) if logits.ndim else None
    if x is None or x.shape[0] != labels.size:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("cross_entropy: labels must be integers")
    c = x.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    labels = labels.reshape(-1)
    z = x - np.max(x, axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(z), axis=1))
    rows = np.arange(labels.size)
    nll = logsum - z[rows, labels]
    n = labels.size

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((float(g) / n) * p.reshape(logits.shape),)

    return logits.graph.record("cross_entropy", (logits,), np.sum(nll) / n, backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error; gradients flow to both operands."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    if n == 0:
        raise ShapeError("mse: empty operands")

    def backward(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return pred.graph.record("mse", (pred, target), np.sum(diff * diff) / n, backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then
    apply the elementwise affine map ``weight * xhat + bias``."""
    if not eps > 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("layer_norm: input needs a non-empty last axis")
    h = x.shape[-1]
    if weight.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: weight {weight.shape} / bias {bias.shape} vs hidden {h}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = weight.data * xhat + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gw = np.sum(g * xhat, axis=reduce_axes)
        gb = np.sum(g, axis=reduce_axes)
        gx_hat = g * weight.data
        gx = inv * (gx_hat - np.mean(gx_hat, axis=-1, keepdims=True)
                    - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        return gx, gw, gb

    return x.graph.record("layer_norm", (x, weight, bias), out, backward, eps=eps)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer with weights stored as ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    return add(matmul(x, transpose(weight, (1, 0))), bias)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "elementwise_mul": mul,
    "gelu": gelu,
    "softmax_lastaxis": softmax,
    "embedding_lookup": embedding,
    "cross_entropy": cross_entropy,
    "mse": mse,
}


def primitive_forward(kind: str, *inputs) -> Tensor:
    """Dispatch one of the named primitive kinds."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs)
