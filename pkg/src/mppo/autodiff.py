"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array together with a gradient buffer of the
same shape.  Every primitive applied to a tensor that requires gradients
appends a node to the active :class:`Tape`; :func:`backward` replays the tape
in reverse insertion order and accumulates ``d(loss)/d(leaf)`` into the
``grad`` buffer of each leaf.

Tapes are thread-local.  Use ``with Tape() as tape:`` to scope one training
step, or :func:`no_grad` to run a forward pass without recording.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DomainError", "GraphError", "GradCheckError",
    "GradCheckReport", "as_tensor", "backward", "no_grad", "current_tape", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sigmoid", "log_sigmoid",
    "softplus", "tanh", "log_softmax", "take", "gather", "sum", "mean", "power",
    "reshape", "transpose", "concat", "stack", "segment_sum",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class DomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


class GraphError(RuntimeError):
    """Backward was requested on something that is not a recorded scalar."""


class GradCheckError(RuntimeError):
    """The function under a gradient check was not finite at a probe point."""


class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "node_id", "_tape", "_gen")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self._gen = -1

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; intermediates never touch it
        if self._grad is None or self._grad.shape != self.values.shape:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.values, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.values)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, k: power(self, k)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


# -- tape -------------------------------------------------------------------

@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = [Tape()]
        self.grad_enabled = True


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0
        self._leaves: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        out._gen = self.generation
        for t in inputs:
            if t.requires_grad and not self._owns(t):
                self._leaves[id(t)] = t
        self.nodes.append(_Node(out, inputs, fn))

    def _owns(self, t: Tensor) -> bool:
        return t._tape is self and t._gen == self.generation and t.node_id is not None

    def reset(self) -> None:
        """Drop all nodes and zero the gradients of every leaf seen so far."""
        self.nodes.clear()
        self.generation += 1
        for leaf in self._leaves.values():
            leaf.zero_grad()
        self._leaves.clear()

    def __enter__(self) -> Tape:
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


_state = _State()


def current_tape() -> Tape:
    return _state.stack[-1]


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out._grad = None
    out.node_id = None
    out._tape = None
    out._gen = -1
    out.requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        current_tape().record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor that is detached from any tape")
    if loss.node_id is None:
        loss.grad += 1.0
        return
    tape = loss._tape
    if not tape._owns(loss):
        raise GraphError("backward on a tensor whose tape has been reset")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if tape._owns(inp):
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
            else:
                inp.grad += gi


# -- primitives ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.values == 0):
        raise DomainError("div: division by zero")
    out = a.values / b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")
    return _make(a.values @ b.values, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError(f"log: non-positive input (min {a.values.min():.6g})")
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.values)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(_softplus(a.values), (a,), lambda g: (g * _sigmoid(a.values),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) evaluated as -softplus(-a); finite for any finite input."""
    a = as_tensor(a)
    return _make(-_softplus(-a.values), (a,), lambda g: (g * _sigmoid(-a.values),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("log_softmax: needs at least one axis")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), fn)


def take(a, idx) -> Tensor:
    """Index along the first axis (embedding lookup, element extraction)."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("take: cannot index a scalar")
    if not isinstance(idx, (int, np.integer)):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
            raise ShapeError(f"take: index out of range for axis of length {a.shape[0]}")
    elif not -a.shape[0] <= idx < a.shape[0]:
        raise ShapeError(f"take: index {idx} out of range for axis of length {a.shape[0]}")

    def fn(g):
        full = np.zeros_like(a.values)
        if isinstance(idx, (int, np.integer)):
            full[idx] = g
            return (full,)
        flat = idx.reshape(-1) % a.shape[0]
        g = g.reshape((flat.size,) + a.shape[1:])
        order = np.argsort(flat, kind="stable")
        rows, starts = np.unique(flat[order], return_index=True)
        if rows.size:
            full[rows] = np.add.reduceat(g[order], starts, axis=0)
        return (full,)

    return _make(a.values[idx].copy(), (a,), fn)


def gather(a, idx) -> Tensor:
    """Pick one entry per row along the last axis: out[..., ] = a[..., idx[...]]."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"gather: index out of range for last axis of length {a.shape[-1]}")
    out = np.take_along_axis(a.values, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        full = np.zeros_like(a.values)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), fn)


def sum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.values.sum(axis=axis)), (a,), fn)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty reduction")
    return mul(sum(a, axis), 1.0 / n)


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    if not k.is_integer() and np.any(a.values <= 0):
        raise DomainError(f"power: non-integer exponent {k} needs positive inputs")
    if k < 0 and np.any(a.values == 0):
        raise DomainError(f"power: negative exponent {k} at zero")
    return _make(a.values ** k, (a,), lambda g: (g * k * a.values ** (k - 1.0),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: needs a matrix, got shape {a.shape}")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


def concat(items: Iterable, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    if not items:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.values for t in items], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in items]} do not align") from None
    cuts = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _make(out, tuple(items), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(items: Iterable) -> Tensor:
    items = [as_tensor(t) for t in items]
    if not items:
        raise ShapeError("stack: nothing to stack")
    if len({t.shape for t in items}) != 1:
        raise ShapeError(f"stack: shapes {[t.shape for t in items]} differ")
    out = np.stack([t.values for t in items])
    return _make(out, tuple(items), lambda g: tuple(g[i] for i in range(len(items))))


def segment_sum(a, lengths) -> Tensor:
    """Sum consecutive runs of a 1-D tensor; run sizes are given by ``lengths``."""
    a = as_tensor(a)
    lengths = np.asarray(lengths, dtype=np.intp)
    if a.ndim != 1 or lengths.sum() != a.shape[0] or np.any(lengths < 1):
        raise ShapeError(f"segment_sum: lengths {lengths.tolist()} do not tile shape {a.shape}")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return _make(np.add.reduceat(a.values, starts), (a,), lambda g: (np.repeat(g, lengths),))


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray
    tol: float

    @property
    def max_error(self) -> float:
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def worst_coordinate(self) -> int:
        return int(self.errors.argmax()) if self.errors.size else -1

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients of ``f`` at ``point`` with central differences.

    The error at each coordinate is relative, ``|a - n| / max(|a|, |n|)``,
    except where both magnitudes fall below 1e-6; there it is absolute.
    """
    x0 = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    with Tape():
        x = Tensor(x0, requires_grad=True)
        y = f(x)
        if not np.isfinite(y.values).all():
            raise GradCheckError("f is not finite at the check point")
        backward(y)
    analytic = x.grad.reshape(-1).copy()

    numeric = np.empty(x0.size)
    with no_grad():
        for i in range(x0.size):
            probe = []
            for step in (eps, -eps):
                xs = x0.copy()
                xs.flat[i] += step
                v = f(Tensor(xs)).item()
                if not np.isfinite(v):
                    raise GradCheckError(f"f is not finite at coordinate {i} (step {step:+g})")
                probe.append(v)
            numeric[i] = (probe[0] - probe[1]) / (2.0 * eps)

    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    errors = np.where(scale < 1e-6, diff, diff / np.where(scale < 1e-6, 1.0, scale))
    return GradCheckReport(analytic, numeric, errors, tol)
