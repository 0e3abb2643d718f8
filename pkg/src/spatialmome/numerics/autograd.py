"""Small reverse-mode autodiff over numpy arrays.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient. Backward traversal walks the tape in reverse
recording order, which is a valid reverse topological order because a node
is appended only after all of its inputs exist.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_local = threading.local()


class NumericError(RuntimeError):
    """Raised when a forward value or the loss is NaN."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; only one tape is active per thread.
    """

    nodes: list[Node] = field(default_factory=list)
    _prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from its recorded inputs."""
        return [node.forward(*(t.data for t in node.inputs)) for node in self.nodes]


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


class no_record:
    """Temporarily disable recording (e.g. for inference)."""

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(op: str, inputs: Sequence[Tensor], out: np.ndarray, fwd, bwd) -> Tensor:
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs and tape is not None)
    if result.requires_grad:
        node = Node(op, tuple(inputs), result, fwd, bwd)
        result._node = node
        tape.nodes.append(node)
    return result


def _unary(op, x, fwd, dfn):
    x = as_tensor(x)
    out = fwd(x.data)
    return _make(op, (x,), out, fwd, lambda g: (dfn(g, x.data, out),))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    op = "add" if a.shape == b.shape else "broadcast_add"
    return _make(op, (a, b), a.data + b.data, np.add,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", (a, b), a.data - b.data, np.subtract,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", (a, b), a.data * b.data, np.multiply,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make("div", (a, b), out, np.divide,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(x) -> Tensor:
    return _unary("neg", x, np.negative, lambda g, x, y: -g)


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, x, y: g * y)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda g, x, y: g / x)


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def square(x) -> Tensor:
    return _unary("square", x, np.square, lambda g, x, y: 2.0 * g * x)


def abs(x) -> Tensor:  # noqa: A001
    # right-derivative at 0: d|x|/dx = +1
    return _unary("abs", x, np.abs, lambda g, x, y: g * np.where(x >= 0, 1.0, -1.0))


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu(x) -> Tensor:
    """Exact (erf) GELU; smooth everywhere."""
    def d(g, x, y):
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)
    return _unary("gelu", x, _gelu, d)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if b.ndim == 2 and a.ndim > 2:
            # shared weight matrix: fold the batch axes into one GEMM
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", (a, b), a.data @ b.data, np.matmul, bwd)


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def fwd(v):
        return np.sum(v, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", (x,), fwd(x.data), fwd, bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalisation


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def fwd(v):
        m = np.max(v, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(v - m)
        return e / np.sum(e, axis=axis, keepdims=True)

    out = fwd(x.data)

    def bwd(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make("softmax", (x,), out, fwd, bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)

    def fwd(v, gm, bt):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * gm + bt

    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        n = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make("layer_norm", (x, gamma, beta), out, fwd, bwd)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", (x,), x.data.reshape(shape), lambda v: v.reshape(shape),
                 lambda g: (g.reshape(x.shape),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make("swapaxes", (x,), np.swapaxes(x.data, a, b), lambda v: np.swapaxes(v, a, b),
                 lambda g: (np.swapaxes(g, a, b),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make("transpose", (x,), np.transpose(x.data, axes), lambda v: np.transpose(v, axes),
                 lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    """Basic slicing or integer-array gathering (the 'slice' primitive)."""
    x = as_tensor(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", (x,), x.data[index], lambda v: v[index], bwd)


def scatter_rows(x, index: np.ndarray, n: int) -> Tensor:
    """Place rows of ``x`` at positions ``index`` of a zero array with ``n`` rows."""
    x = as_tensor(x)
    index = np.asarray(index)

    def fwd(v):
        out = np.zeros((n,) + v.shape[1:])
        out[index] = v
        return out

    return _make("scatter", (x,), fwd(x.data), fwd, lambda g: (g[index],))


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def fwd(*vs):
        return np.concatenate(vs, axis=axis)

    return _make("concat", xs, fwd(*(t.data for t in xs)), fwd,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def fwd(*vs):
        return np.stack(vs, axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make("stack", xs, fwd(*(t.data for t in xs)), fwd, bwd)


# ---------------------------------------------------------------- backward


def forward_backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Backpropagate ``loss`` through ``tape``.

    Returns a gradient for every leaf tensor with ``requires_grad`` that the
    tape touched, plus zero gradients for any extra ``params`` not reached.
    Gradients are also stored on ``tensor.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    for i, node in enumerate(tape.nodes):
        if np.isnan(node.output.data).any():
            raise NumericError(f"NaN produced by node {i} ({node.op})")
    if np.isnan(loss.data).any():
        raise NumericError("loss is NaN")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                leaves.setdefault(id(t), t)
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        t.grad = grads[key]
        result[t] = t.grad
    if loss._node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        result[loss] = loss.grad
    for p in params:
        if p not in result:
            p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    return result
