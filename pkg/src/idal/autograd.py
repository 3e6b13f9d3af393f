"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable op appends one :class:`Node` to the current thread's
:class:`Tape` when at least one input requires a gradient.  :func:`backward`
walks the tape in reverse, pushes gradients into the leaves' ``.grad``
buffers (accumulating) and then frees the tape.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

LOG_EPS = 1e-12

__all__ = [
    "Tensor", "Tape", "Node", "current_tape", "no_grad", "backward", "grad_check",
    "matmul", "add", "sub", "mul", "div", "neg", "relu", "exp", "log", "sigmoid",
    "softmax_rows", "log_softmax_rows", "sum", "mean", "abs", "clamp", "concat",
    "reshape", "transpose", "sq_dists", "custom_op", "LOG_EPS",
]


class Node:
    """One recorded forward op: kind, inputs, output and its vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.op}: {[id(t) for t in self.inputs]} -> {id(self.output)})"


class Tape:
    """Append-only op record.  Insertion order is a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.enabled = True

    def record(self, node: Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape (evaluation, finite differences)."""
    tape = current_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "name", "__weakref__")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str = "", _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            raise NumericError(f"tensor {name or '<unnamed>'}: non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._is_leaf = True
        self.name = name

    # -- views -----------------------------------------------------------
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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{rg})"

    def __len__(self):
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sigmoid(self): return sigmoid(self)
    def abs(self): return abs(self)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def custom_op(op: str, inputs: Sequence, out_data: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``out_data`` as the output of op ``op``.

    ``vjp(g)`` receives the upstream gradient and returns one gradient (or
    ``None``) per input, each already shaped like that input.
    """
    inputs = tuple(inputs)
    if not np.isfinite(out_data).all():
        raise NumericError(f"{op}: produced non-finite output from inputs of shape "
                           + ", ".join(str(t.shape) for t in inputs))
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = ""
    out._is_leaf = False
    tape = current_tape()
    out.requires_grad = tape.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(Node(op, inputs, out, vjp))
    return out


def _broadcast_check(op, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- binary ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    return custom_op("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    return custom_op("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)
    return custom_op("mul", (a, b), a.data * b.data,
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data
    return custom_op("div", (a, b), out,
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return custom_op("matmul", (a, b), a.data @ b.data,
                     lambda g: (g @ b.data.T, a.data.T @ g))


# -- unary ----------------------------------------------------------------

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return custom_op("neg", (x,), -x.data, lambda g: (-g,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return custom_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return custom_op("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    """Natural log of ``max(x, LOG_EPS)``; zero gradient inside the clamp."""
    x = _as_tensor(x)
    safe = np.maximum(x.data, LOG_EPS)
    live = x.data >= LOG_EPS
    return custom_op("log", (x,), np.log(safe), lambda g: (g * live / safe,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return custom_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return custom_op("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def clamp(x, lo=None, hi=None) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return custom_op("clamp", (x,), out, lambda g: (g * inside,))


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return custom_op("softmax_rows", (x,), out, vjp)


def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return custom_op("log_softmax_rows", (x,), out,
                     lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def sq_dists(a, b) -> Tensor:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("sq_dists", a.shape, b.shape)
    A, B = a.data, b.data
    # explicit differences: identical rows give exactly 0, unlike the |a|^2+|b|^2-2ab expansion
    out = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)

    def vjp(g):
        ga = 2.0 * (A * g.sum(1)[:, None] - g @ B)
        gb = 2.0 * (B * g.sum(0)[:, None] - g.T @ A)
        return ga, gb

    return custom_op("sq_dists", (a, b), out, vjp)


# -- reductions & shape ---------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise ShapeError("mean", x.shape, detail="empty reduction")
    return sum(x, axis, keepdims) * (1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(np.atleast_1d(shape))) from None
    return custom_op("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    return custom_op("transpose", (x,), x.data.T, lambda g: (g.T,))


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return custom_op("getitem", (x,), np.array(out), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- backward ---------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate into existing ``.grad`` buffers; the tape is
    cleared afterwards.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    tape = tape or current_tape()
    try:
        if not loss.requires_grad:
            return
        if loss._is_leaf:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones(loss.shape)
            return
        grads = {id(loss): np.ones(loss.shape)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._is_leaf:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
    finally:
        tape.clear()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError("grad_check", out.shape, detail="f must return a scalar")
    backward(out)
    analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad

    base = x.data.copy()
    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(base)).item()
            flat[i] = orig - step
            lo = f(Tensor(base)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
