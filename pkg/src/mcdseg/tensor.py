"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation appends a :class:`TapeNode` to a
thread-local tape while at least one of its inputs requires a gradient.
:func:`backward` replays the tape in strict reverse order, writes the
gradient into ``.grad`` of each tensor that requires one, then clears the
tape.  Binary operations accept equal shapes or a Python scalar; there is
no other broadcasting.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError, TapeError

PROB_EPS = 1e-7
LEAKY_SLOPE = 0.1

Scalar = (int, float, np.floating, np.integer)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.is_leaf = not requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def tensor_create(shape: Sequence[int], fill=0.0, requires_grad: bool = False) -> Tensor:
    """Build a row-major tensor from a scalar fill value or an explicit value list."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    if isinstance(fill, Scalar):
        arr = np.full(shape, float(fill))
    else:
        values = np.asarray(fill, dtype=np.float64).reshape(-1)
        if values.size != math.prod(shape):
            raise ShapeError(f"{values.size} values do not fill shape {shape}")
        arr = values.reshape(shape)
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.enabled = True

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, evaluation)."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and log a tape node if needed.

    ``backward_fn`` maps the output gradient to a tuple with one gradient
    (or None) per input.  Layer implementations outside this module use
    this to register their own ops.
    """
    _check_finite(data, op)
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor that requires one with d(loss)/d(tensor)."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    seed = np.ones(loss.shape)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = get_tape()
    if not any(node.output is loss for node in reversed(tape.nodes)):
        raise TapeError("no recorded forward pass for this loss (backward called twice?)")

    pending: dict[int, np.ndarray] = {id(loss): seed}
    try:
        for node in reversed(tape.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                _check_finite(gi, f"backward of {node.op}")
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
    finally:
        tape.clear()


# --------------------------------------------------------------------------
# elementwise ops


def _binary_operand(a: Tensor, b) -> tuple[Tensor | None, float | None]:
    if isinstance(b, Scalar):
        return None, float(b)
    b = as_tensor(b)
    if b.shape != a.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    return b, None


def add(a: Tensor, b) -> Tensor:
    bt, c = _binary_operand(a, b)
    if bt is None:
        return record("add", a.data + c, (a,), lambda g: (g,))
    return record("add", a.data + bt.data, (a, bt), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    bt, c = _binary_operand(a, b)
    if bt is None:
        return record("sub", a.data - c, (a,), lambda g: (g,))
    return record("sub", a.data - bt.data, (a, bt), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    bt, c = _binary_operand(a, b)
    if bt is None:
        return record("mul", a.data * c, (a,), lambda g: (g * c,))
    x, y = a.data, bt.data
    return record("mul", x * y, (a, bt), lambda g: (g * y, g * x))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return record("relu", np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def leaky_relu(a: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    pos = x > 0
    out = np.where(pos, x, alpha * x)
    return record("leaky_relu", out, (a,), lambda g: (np.where(pos, g, alpha * g),))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def ln(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericError("ln of a non-positive value; clamp the input first")
    return record("ln", np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return record("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record("mean", np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; every other extent must agree."""
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"cannot concatenate {t.shape} with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(v) for v in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


_UNARY = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "ln": ln,
    "clamp": clamp,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b=None, **params) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, leaky_relu, sigmoid, ln, clamp."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a, **params)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# verification harness


def grad_check(builder: Callable[[], tuple[Sequence[Tensor], Callable[[], Tensor]]],
               eps: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    ``builder`` returns ``(tensors, forward)`` where ``forward()`` rebuilds
    the scalar loss from the current contents of ``tensors``.  Each
    tensor's error is ``||analytic - numeric|| / max(||numeric||, 1e-8)``;
    the largest one is returned.  The divisor of each difference quotient
    is the actually representable step ``x_plus - x_minus``.
    """
    tensors, forward = builder()
    tensors = list(tensors)
    get_tape().clear()
    for t in tensors:
        t.grad = None
    loss = forward()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                xp, xm = orig + eps, orig - eps
                flat[i] = xp
                fp = forward().item()
                flat[i] = xm
                fm = forward().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (xp - xm)
            if not (np.isfinite(numeric).all() and np.isfinite(a).all()):
                raise NumericError("non-finite gradient during grad_check")
            err = np.linalg.norm(a.reshape(-1) - numeric) / max(np.linalg.norm(numeric), 1e-8)
            worst = max(worst, float(err))
    return worst
