"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation appends a node to the active :class:`Graph`. Nodes are
stored in execution order, so the tape is already topologically sorted and
:func:`backward` is a single reverse sweep.

    >>> with Graph() as g:
    ...     x = Tensor([3.0], requires_grad=True)
    ...     y = (x * x).sum()
    ...     backward(y, g)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_index")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t._graph = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    input_ids: tuple[int | None, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only tape of operations.

    Use as a context manager to make it the active graph for the current
    thread. Tensors produced inside another graph are treated as leaves.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack[-1] is not self:
            raise RuntimeError("graph contexts exited out of order")
        stack.pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp) -> None:
        ids = tuple(t._index if t._graph is self else None for t in inputs)
        out._graph = self
        out._index = len(self.nodes)
        self.nodes.append(Node(op, inputs, ids, out, vjp))


_local = threading.local()


def _stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Graph()]
    return stack


def current_graph() -> Graph:
    return _stack()[-1]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    t = Tensor._wrap(out, any(i.requires_grad for i in inputs))
    current_graph().record(op, inputs, t, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains zeros")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


# nonlinearities

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def log(a) -> Tensor:
    """Natural log with the argument clamped below at ``LOG_EPS``."""
    a = as_tensor(a)
    inside = a.data > LOG_EPS
    safe = np.where(inside, a.data, LOG_EPS)
    return _emit("log", (a,), np.log(safe), lambda g: (np.where(inside, g / safe, 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (a,), s,
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _emit("log_softmax", (a,), ls,
                 lambda g: (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),))


def l2_norm_rows(a) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_norm_rows: expected a 2-D tensor, got shape {a.shape}")
    ad = a.data
    n = np.sqrt(np.einsum("ij,ij->i", ad, ad))

    def vjp(g):
        scale = np.divide(g, n, out=np.zeros_like(n), where=n > 0.0)
        return (ad * scale[:, None],)

    return _emit("l2_norm_rows", (a,), n, vjp)


def grad_reverse(a, beta: float) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-beta``."""
    a = as_tensor(a)
    beta = float(beta)
    return _emit("grad_reverse", (a,), a.data.copy(), lambda g: (-beta * g,))


# reductions

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),
                 lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError(f"mean: empty reduction over axis {axis} of shape {shape}")
    return _emit("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)),
                 lambda g: (_expand(g / count, shape, axis, keepdims),))


def max_(a, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; ties resolve to the lowest index."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"max: empty axis {axis} of shape {a.shape}")
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit("max", (a,), out, vjp)


# structural

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take_rows", (a,), a.data[index], vjp)


def pick(a, index) -> Tensor:
    """Select ``a[i, index[i]]`` for every row ``i`` of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: expected (N, C) and (N,), got {a.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise IndexError(f"pick: column index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _emit("pick", (a,), a.data[rows, index], vjp)


def detach(a) -> Tensor:
    """A constant copy that takes no part in any graph."""
    return Tensor(as_tensor(a).data)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "l2_norm_rows": l2_norm_rows,
    "grad_reverse": grad_reverse,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "reshape": reshape,
    "concat": concat,
    "take_rows": take_rows,
    "pick": pick,
}


def forward(op_kind: str, *inputs, **attrs) -> Tensor:
    """Apply the operation named ``op_kind``; see ``OPS`` for the set."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    if op_kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if graph is None:
        graph = root._graph
    if graph is None or root._graph is not graph:
        raise ValueError("backward: root was not produced in this graph")
    grads: dict[int, np.ndarray] = {root._index: np.ones_like(root.data)}
    nodes = graph.nodes
    for idx in range(root._index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        for t, tid, ig in zip(node.inputs, node.input_ids, node.vjp(g)):
            if ig is None or not t.requires_grad:
                continue
            if tid is not None:
                prev = grads.get(tid)
                grads[tid] = ig if prev is None else prev + ig
            else:
                t.grad = np.array(ig, dtype=np.float64) if t.grad is None else t.grad + ig
    stack = _stack()
    if graph is stack[0]:
        # the implicit per-thread tape is released after each sweep
        stack[0] = Graph()


def gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The relative error at each coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"gradcheck: eps must lie in (0, 1e-2], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)

    with Graph() as g:
        leaf = Tensor(x0, requires_grad=True)
        out = f(leaf)
        _check_scalar(out)
        backward(out, g)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    def value(arr):
        with Graph():
            v = f(Tensor(arr))
        return _check_scalar(v)

    worst = 0.0
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        numeric = (value(xp) - value(xm)) / (2.0 * eps)
        a = analytic.flat[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def _check_scalar(out) -> float:
    out = as_tensor(out)
    if out.size != 1:
        raise ValueError(f"gradcheck: function must return a scalar, got shape {out.shape}")
    v = out.item()
    if not np.isfinite(v):
        raise ValueError(f"gradcheck: function value is not finite ({v})")
    return v
