"""Dense float64 tensors with recorded operations and reverse-mode gradients.

Every operation on a tensor that requires grad records a :class:`Node` holding
its inputs and a closure mapping the output gradient to input gradients.
:func:`backward` collects the nodes reachable from a scalar loss into a
topologically ordered :class:`Tape` and replays it once in reverse.

Discrete selections (``max``/``min`` reductions, integer indexing with indices
computed from data) pass gradient only to the selected entries; the selection
itself is a constant of the forward pass.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "GradientError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "broadcast_to",
    "concat",
    "elementwise_apply",
    "finite_difference_gradient",
    "gradient_relative_error",
    "matmul",
    "maximum",
    "no_grad",
    "reduce_stats",
    "stack",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_state = threading.local()
_sequence = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_sequence)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node(self) -> Node | None:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def tolist(self):
        return self.data.tolist()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator overloads -----------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _record(-self.data, "neg", (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- unary ops ----------------------------------------------------------

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise DomainError(f"sqrt of negative value (min {self.data.min():.6g})")
        out = np.sqrt(self.data)

        def grad_fn(g):
            # subgradient 0 at the kink x=0
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g / (2.0 * safe), 0.0),)

        return _record(out, "sqrt", (self,), grad_fn)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _record(out, "exp", (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise DomainError(f"log of nonpositive value (min {self.data.min():.6g})")
        x = self.data
        return _record(np.log(x), "log", (self,), lambda g: (g / x,))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return _record(np.abs(self.data), "abs", (self,), lambda g: (g * sign,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _record(np.where(mask, self.data, 0.0), "relu", (self,), lambda g: (g * mask,))

    def square(self) -> "Tensor":
        return self * self

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {src} to {shape}") from exc
        return _record(out, "reshape", (self,), lambda g: (g.reshape(src),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {self.shape}")
        return _record(self.data.T.copy(), "transpose", (self,), lambda g: (g.T,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        src = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return _record(out, "sum", (self,), grad_fn)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        if count == 0:
            raise ShapeError(f"mean over empty axis of shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int | None = None) -> "Tensor":
        return _select_reduce(self, axis, np.argmax, "max")

    def min(self, axis: int | None = None) -> "Tensor":
        return _select_reduce(self, axis, np.argmin, "min")


# -- recording ---------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = np.asarray(out, dtype=np.float64)
    result.grad = None
    result._node = None
    result.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, inputs, backward_fn)
    return result


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def _mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    return _record(
        a.data / b.data, "div", (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def maximum(a, b) -> Tensor:
    """Pairwise maximum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    take_a = a.data >= b.data
    return _record(
        np.where(take_a, a.data, b.data), "max_pairwise", (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def _select_reduce(x: Tensor, axis: int | None, argfn, op: str) -> Tensor:
    if x.size == 0:
        raise ShapeError(f"{op} over empty tensor")
    if axis is None:
        flat = int(argfn(x.data))
        out = x.data.reshape(-1)[flat]

        def grad_fn(g):
            full = np.zeros(x.size)
            full[flat] = g
            return (full.reshape(x.shape),)

        return _record(np.asarray(out), op, (x,), grad_fn)

    idx = np.expand_dims(argfn(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def grad_fn(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, op, (x,), grad_fn)


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), "getitem", (x,), grad_fn)


def matmul(a, b) -> Tensor:
    """``(..., k) @ (k, n)``; leading axes of ``a`` are treated as a batch of rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record(out, "matmul", (a, b), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record(
        out, "stack", tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"shape mismatch: cannot broadcast {x.shape} to {shape}") from None
    return _record(out, "broadcast_to", (x,), lambda g: (_unbroadcast(g, x.shape),))


_ELEMENTWISE = {
    "add": lambda a, b: _add(a, b),
    "sub": lambda a, b: _sub(a, b),
    "mul": lambda a, b: _mul(a, b),
    "div": lambda a, b: _div(a, b),
    "max_pairwise": maximum,
    "scale_by_constant": lambda a, c: _mul(a, float(c)),
    "sqrt": lambda a, _: a.sqrt(),
    "exp": lambda a, _: a.exp(),
    "log": lambda a, _: a.log(),
    "abs": lambda a, _: a.abs(),
    "relu": lambda a, _: a.relu(),
}


def elementwise_apply(op: str, a, b=None) -> Tensor:
    """Apply a named elementwise operation (see ``_ELEMENTWISE`` for names)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(_as_tensor(a), b)


def reduce_stats(x: Tensor, axis: int = 1) -> tuple[Tensor, Tensor]:
    """Mean and biased variance over the location axis of an ``(N, L, d)`` tensor."""
    if x.ndim != 3:
        raise ShapeError(f"reduce_stats expects (N, L, d), got {x.shape}")
    if x.shape[axis] == 0:
        raise ShapeError("reduce_stats over an empty location axis")
    mean = x.mean(axis=axis, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axis)
    return mean.reshape(mean.shape[0], mean.shape[2]), var


# -- reverse pass ------------------------------------------------------------


class Tape:
    """Recorded nodes reachable from an output, in topological order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack_ = [output]
        while stack_:
            t = stack_.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack_.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
            return
        raise GradientError("backward called on a tensor with no recorded tape")

    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(tape.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


# -- finite differences ------------------------------------------------------


def finite_difference_gradient(f: Callable[[Tensor], object], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x`` is perturbed in place and restored; ``f`` must be deterministic.
    """
    target = x if isinstance(x, Tensor) else Tensor(x)
    target.data = np.ascontiguousarray(target.data)
    flat = target.data.reshape(-1)
    grad = np.zeros(flat.size)

    def evaluate() -> float:
        value = f(target)
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise GradientError("non-finite function value during finite differencing")
        return value

    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * h)
    return Tensor(grad.reshape(target.shape))


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
