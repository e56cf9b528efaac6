"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every forward primitive appends one record to the active :class:`Graph`.
``backward`` replays that record in reverse and accumulates gradients into
``Tensor.grad``.  A graph is meant to live for a single minibatch.

Example::

    w = Tensor(rng.normal(size=(3, 2)))
    with Graph():
        loss = ad.mean(ad.sigmoid(ad.matmul(x, w)))
    backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NumericError",
    "UsageError",
    "GraphError",
    "OracleError",
    "Tensor",
    "Graph",
    "no_grad",
    "backward",
    "finite_difference_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softplus",
    "softmax_rows",
    "log_softmax_rows",
    "sum",
    "mean",
    "slice_columns",
    "concat_columns",
    "reshape",
    "take_columns",
]


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, node_id: int | None, detail: str = "non-finite output"):
        self.op = op
        self.node_id = node_id
        super().__init__(f"{op} (node {node_id}): {detail}")


class UsageError(AutodiffError):
    pass


class GraphError(AutodiffError):
    pass


class OracleError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array with a gradient slot.

    Leaf tensors (parameters, inputs) are created directly.  Tensors produced
    by primitives carry a reference to the graph that recorded them.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph", "node_id", "name")

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensor", arr.shape, detail="empty tensors are not allowed")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.graph: Graph | None = None
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def constant(cls, data, name: str | None = None) -> "Tensor":
        return cls(data, requires_grad=False, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.node_id})"

    # operator sugar, all routed through the recorded primitives
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor.constant(np.full(like.shape, float(value)))


@dataclass
class Node:
    node_id: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] = field(repr=False)


_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _recording() -> bool:
    return not getattr(_local, "paused", False) and bool(_graph_stack())


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate primitives without recording them."""
    prev = getattr(_local, "paused", False)
    _local.paused = True
    try:
        yield
    finally:
        _local.paused = prev


class Graph:
    """Ordered record of primitive applications.

    Used as a context manager it becomes the active graph for the current
    thread.  Primitives evaluated with no active graph are not recorded and
    return constants.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._next_id = 0
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def active() -> "Graph | None":
        stack = _graph_stack()
        return stack[-1] if stack else None

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _leaf_id(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = self._new_id()
        return self._leaf_ids[key]

    def record(self, op, inputs, out_data, backward_fn) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = np.zeros_like(out_data)
        out.requires_grad = True
        out.name = None
        for t in inputs:
            if t.graph is None and t.requires_grad:
                self._leaf_id(t)
        out.graph = self
        out.node_id = self._new_id()
        self.nodes.append(Node(out.node_id, op, tuple(inputs), out, backward_fn))
        return out


def _resolve_graph(op: str, inputs: Sequence[Tensor]) -> Graph:
    active = Graph.active()
    for t in inputs:
        if t.graph is not None and t.graph is not active:
            raise GraphError(f"{op}: input recorded on a different graph than the active one")
    return active


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    needs_grad = _recording() and any(t.requires_grad for t in inputs)
    if not np.all(np.isfinite(out_data)):
        node_id = None
        if needs_grad:
            g = _resolve_graph(op, inputs)
            node_id = g._next_id
        raise NumericError(op, node_id)
    if not needs_grad:
        return Tensor.constant(out_data)
    return _resolve_graph(op, inputs).record(op, inputs, out_data, backward_fn)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.constant(x)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Promote python scalars against the other operand's shape."""
    if not isinstance(a, Tensor) and np.ndim(a) == 0 and isinstance(b, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        b = _lift(b, a)
    return _as_tensor(a), _as_tensor(b)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _apply("matmul", (a, b), A @ B, bw)


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True when ``b`` is a row vector added across the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return True
    raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    a, b = _operands(a, b)
    bcast = _row_broadcast("add", a, b)
    bshape = b.shape

    def bw(g):
        gb = g.sum(axis=0).reshape(bshape) if bcast else g
        return g, gb

    return _apply("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    a, b = _operands(a, b)
    bcast = _row_broadcast("sub", a, b)
    bshape = b.shape

    def bw(g):
        gb = g.sum(axis=0).reshape(bshape) if bcast else g
        return g, -gb

    return _apply("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _apply("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _apply("scale", (a,), a.data * c, lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _apply("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly zero is taken as 0."""
    a = _as_tensor(a)
    on = a.data > 0
    return _apply("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _apply("exp", (a,), e, lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log", None, "input must be strictly positive")
    return _apply("log", (a,), np.log(x), lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply("softplus", (a,), out, lambda g: (g * s,))


def _check_matrix(op: str, a: Tensor) -> None:
    if a.data.ndim != 2:
        raise ShapeError(op, a.shape, detail="expected a 2-D tensor")


def softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_matrix("softmax_rows", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        # J^T g without forming the Jacobian
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _apply("softmax_rows", (a,), p, bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_matrix("log_softmax_rows", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _apply("log_softmax_rows", (a,), out, bw)


def _check_axis(op: str, a: Tensor, axis) -> None:
    if axis is None:
        return
    if axis != 1 or a.data.ndim != 2:
        raise ShapeError(op, a.shape, detail=f"axis={axis} unsupported; use None or 1 on a matrix")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Full sum (axis=None, 0-d result) or per-row sum (axis=1)."""
    a = _as_tensor(a)
    _check_axis("sum", a, axis)
    shape = a.shape
    if axis is None:
        return _apply("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, float(g)),))
    return _apply("sum", (a,), a.data.sum(axis=1), lambda g: (np.repeat(g[:, None], shape[1], axis=1),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis("mean", a, axis)
    shape = a.shape
    if axis is None:
        n = a.size
        return _apply("mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, float(g) / n),))
    m = shape[1]
    return _apply("mean", (a,), a.data.mean(axis=1), lambda g: (np.repeat(g[:, None] / m, m, axis=1),))


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    _check_matrix("slice_columns", a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError("slice_columns", a.shape, detail=f"columns [{start}, {stop}) out of range")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _apply("slice_columns", (a,), a.data[:, start:stop].copy(), bw)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_columns", detail="nothing to concatenate")
    for p in parts:
        _check_matrix("concat_columns", p)
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_columns", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _apply("concat_columns", parts, np.concatenate([p.data for p in parts], axis=1), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _apply("reshape", (a,), out.copy(), lambda g: (g.reshape(old),))


def take_columns(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[:, index]``; repeated indices accumulate on the way back."""
    a = _as_tensor(a)
    _check_matrix("take_columns", a)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or index.size == 0 or index.min() < 0 or index.max() >= a.shape[1]:
        raise ShapeError("take_columns", a.shape, index.shape, detail="index out of range")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None), index), g)
        return (full,)

    return _apply("take_columns", (a,), a.data[:, index], bw)


# ------------------------------------------------------------------ backward


def _combine(contribs: list[np.ndarray]) -> np.ndarray:
    if len(contribs) == 1:
        return contribs[0]
    # sorting makes the total independent of the order branches were visited
    return np.sort(np.stack(contribs), axis=0).sum(axis=0)


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tensor reachable from ``root``."""
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("root does not depend on any tensor that requires grad")
    graph = graph or root.graph
    if graph is None:
        root.grad = root.grad + 1.0
        return

    pending: dict[int, list[np.ndarray]] = {id(root): [np.ones_like(root.data)]}
    leaves: dict[int, Tensor] = {}
    last_id = None
    for node in reversed(graph.nodes):
        if last_id is not None and node.node_id >= last_id:
            raise GraphError("graph record is not topologically ordered")
        last_id = node.node_id
        contribs = pending.pop(id(node.output), None)
        if contribs is None:
            continue
        g = _combine(contribs)
        node.output.grad = node.output.grad + g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.graph is graph and t.node_id is not None and t.node_id >= node.node_id:
                raise GraphError(f"cycle: node {t.node_id} feeds node {node.node_id}")
            pending.setdefault(id(t), []).append(np.asarray(gi, dtype=np.float64))
            if t.graph is None:
                leaves[id(t)] = t

    # leaves in first-use order keeps accumulation order fixed
    for key in sorted(leaves, key=lambda k: graph._leaf_ids.get(k, -1)):
        t = leaves[key]
        t.grad = t.grad + _combine(pending.pop(key))


# -------------------------------------------------------------------- oracle


def finite_difference_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-6,
    skip: Callable[[Tensor], np.ndarray] | None = None,
) -> float:
    """Compare ``backward`` against central differences.

    ``f`` is called as ``f(*points)`` and must return a scalar tensor.
    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.  ``skip`` may return a
    boolean mask per point of coordinates to leave out (e.g. relu kinks).
    """
    if not 0.0 < h <= 1e-3:
        raise UsageError(f"step h={h} outside (0, 1e-3]")
    points = [point] if isinstance(point, Tensor) else list(point)

    def value() -> float:
        with no_grad():
            return f(*points).item()

    v0 = value()
    if value() != v0:
        raise OracleError("f is not deterministic: repeated evaluation differs")

    saved = [p.grad for p in points]
    for p in points:
        p.zero_grad()
    with Graph():
        out = f(*points)
    if abs(out.item() - v0) > 1e-12 * max(1.0, abs(v0)):
        raise OracleError("recorded and unrecorded evaluations of f differ")
    backward(out)
    analytic = [p.grad.copy() for p in points]
    for p, g in zip(points, saved):
        p.grad = g

    worst = 0.0
    for p, ga in zip(points, analytic):
        mask = None if skip is None else np.asarray(skip(p), dtype=bool).reshape(-1)
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            if mask is not None and mask[i]:
                continue
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
