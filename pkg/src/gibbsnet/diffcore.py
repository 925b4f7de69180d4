"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded only while a :class:`Tape` is active (``with Tape()
as tape:``) and at least one input is tracked.  A tape can be replayed
backwards once; build a new tape for the next loss.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> x = Tensor([[3.0], [4.0]])
    >>> with Tape() as tape:
    ...     loss = (w @ x).sum()
    >>> tape.backward(loss)[w].tolist()
    [[3.0, 4.0]]
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
LEAKY_SLOPE = 0.2


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class ContractError(RuntimeError):
    """A call violated a documented precondition."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on the active tape inside the block."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class Tensor:
    """An n-dimensional float64 array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis: int | None = None):
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None):
        return reduce_mean(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(t: Tensor) -> Tensor:
    """Return a value-identical tensor cut out of every tape."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.name = t.name
    return out


class Node:
    __slots__ = ("index", "op", "parents", "backward_fn", "tape")

    def __init__(self, index, op, parents, backward_fn, tape):
        self.index = index
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


class GradientMap:
    """Gradients keyed by leaf tensor identity; unreached leaves read as zero."""

    def __init__(self, grads: dict, leaves: dict):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def reached(self, t: Tensor) -> bool:
        """True if ``t`` lies on some path from the loss (gradient may still be 0)."""
        return id(t) in self._grads

    def leaves(self) -> list:
        return list(self._leaves.values())

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            raise ContractError("tapes must be exited in LIFO order")

    def record(self, op: str, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        for p in parents:
            if p.requires_grad and p.node is None:
                self.leaves.setdefault(id(p), p)
        node = Node(len(self.nodes), op, parents, backward_fn, self)
        self.nodes.append(node)
        out.node = node
        out.requires_grad = True

    def reachable(self, loss: Tensor) -> list[Node]:
        """Nodes that lie on a path into ``loss``, in tape order."""
        if loss.node is None or loss.node.tape is not self:
            return []
        seen = {loss.node.index}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            if node.index not in seen:
                continue
            for p in node.parents:
                if p.node is not None and p.node.tape is self:
                    seen.add(p.node.index)
        return [n for n in self.nodes if n.index in seen]

    def backward(self, loss: Tensor) -> GradientMap:
        """Accumulate d(loss)/d(leaf) into every tracked leaf.

        Returns the gradients of this call as a :class:`GradientMap`; they are
        also added to ``leaf.grad``.
        """
        if self._consumed:
            raise ContractError("backward() already ran on this tape; start a new Tape")
        if loss.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise ContractError("loss is not connected to this tape (detached or untracked)")
        self._consumed = True

        node_grads: dict[int, np.ndarray] = {loss.node.index: np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = node_grads.pop(node.index, None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.node is not None:
                    if p.node.tape is not self:
                        continue
                    key, store = p.node.index, node_grads
                elif id(p) in self.leaves:
                    key, store = id(p), leaf_grads
                else:  # leaf that was not tracked when the op was recorded
                    continue
                if key in store:
                    store[key] = store[key] + pg
                else:
                    store[key] = pg
        for key, g in leaf_grads.items():
            leaf = self.leaves[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return GradientMap(leaf_grads, self.leaves)


def backward(loss: Tensor) -> GradientMap:
    """Run the backward pass of the tape that produced ``loss``."""
    if loss.node is None:
        raise ContractError("loss is detached from any tape")
    return loss.node.tape.backward(loss)


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(op, out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# binary elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        return (_unbroadcast(g * bd, ad.shape) if ga else None,
                _unbroadcast(g * ad, bd.shape) if gb else None)

    return _make(ad * bd, "mul", (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        return (g @ bd.T if ga else None,
                ad.T @ g if gb else None)

    return _make(ad @ bd, "matmul", (a, b), backward_fn)


# unary elementwise


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped below at 1e-12."""
    a = as_tensor(a)
    x = a.data
    safe = np.maximum(x, LOG_FLOOR)
    return _make(np.log(safe), "log", (a,), lambda g: (g / safe * (x > LOG_FLOOR),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def _step_mask(x: np.ndarray) -> np.ndarray:
    # float 0/1 mask; arithmetic masking is far cheaper than np.where on large arrays
    return (x > 0).astype(np.float64)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.maximum(x, 0.0), "relu", (a,), lambda g: (g * _step_mask(x),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def backward_fn(g):
        scale = _step_mask(x)
        scale *= 1.0 - slope
        scale += slope
        scale *= g
        return (scale,)

    return _make(np.maximum(x, slope * x), "leaky_relu", (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free and exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a [batch, K] tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"log_softmax expects a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, "log_softmax", (a,),
                 lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a [batch, K] tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax expects a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return _make(p, "softmax", (a,),
                 lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


# reductions and shape plumbing


def _check_axis(t: Tensor, axis: int | None, op: str) -> None:
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {t.shape}")


def reduce_sum(t: Tensor, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis, "sum")
    shape = t.shape
    if axis is None:
        return _make(np.asarray(t.data.sum()), "sum", (t,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make(t.data.sum(axis=axis), "sum", (t,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def reduce_mean(t: Tensor, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis, "mean")
    shape = t.shape
    n = t.size if axis is None else shape[axis]
    if axis is None:
        return _make(np.asarray(t.data.mean()), "mean", (t,),
                     lambda g: (np.full(shape, g / n),))
    return _make(t.data.mean(axis=axis), "mean", (t,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    if op == "sum":
        return reduce_sum(t, axis)
    if op == "mean":
        return reduce_mean(t, axis)
    raise ValueError(f"unknown reduction {op!r}")


def transpose(t: Tensor) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {t.shape}")
    return _make(t.data.T, "transpose", (t,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along ``axis``."""
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward_fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(data, "concat", tuple(parts), backward_fn)


def columns(t: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    t = as_tensor(t)
    if t.ndim != 2 or not 0 <= start <= stop <= t.shape[1]:
        raise DimensionError(f"columns[{start}:{stop}] out of range for shape {t.shape}")
    shape = t.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(t.data[:, start:stop], "columns", (t,), backward_fn)


def straight_through(value: np.ndarray, surrogate: Tensor) -> Tensor:
    """Forward ``value`` exactly; backward passes the gradient to ``surrogate`` unchanged."""
    surrogate = as_tensor(surrogate)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != surrogate.shape:
        raise DimensionError(f"straight_through: {value.shape} vs {surrogate.shape}")
    return _make(value, "straight_through", (surrogate,), lambda g: (g,))


_ELEMENTWISE = {
    "add": add, "mul": mul, "sub": sub, "neg": neg, "exp": exp, "log": log,
    "tanh": tanh, "relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def numerical_gradient(f: Callable[[], float], tensors: Iterable[Tensor],
                       step: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of scalar ``f()`` with respect to each tensor.

    ``f`` is re-evaluated with each entry perturbed in place, so it must read
    the tensors' current ``data`` and must not build a tape.
    """
    out = []
    for t in tensors:
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.array(t.data, dtype=np.float64)
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        out.append(g)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, scale_floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, scale_floor)`` over all entries.

    The floor keeps entries whose true derivative is zero from dividing by
    round-off.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale_floor)
    rel = diff / scale
    return float(rel.max()) if rel.size else 0.0
