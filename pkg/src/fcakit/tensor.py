"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and touching at least one
tensor with ``requires_grad=True``, are recorded together with their backward
rule. ``Tape.backward(loss)`` replays the rules in reverse order and
accumulates gradients into the ``grad`` slot of every leaf tensor.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum() * 0.5
    >>> tape.backward(loss)
    >>> w.grad
    array([1., 2.])
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_active: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple, backward_fn: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before reusing it")
        if not self.records:
            raise TapeError("empty tape: no operations were recorded")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")

        produced = {id(out) for out, _, _ in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    if id(inp) in grads:
                        grads[id(inp)] = grads[id(inp)] + gi
                    else:
                        grads[id(inp)] = gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad += gi
        self.consumed = True


def backward(loss: "Tensor") -> None:
    """Backpropagate from ``loss`` through the tape that produced it."""
    tape = loss._tape
    if tape is None:
        raise TapeError("empty tape: loss was not produced by a recorded operation")
    tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable, name: str) -> "Tensor":
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {name}")
    out = Tensor(data, _copy=False)
    if _active and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        _active[-1].record(out, inputs, backward_fn)
    return out


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=_copy) if _copy else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)), "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _make(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, a.shape),
                                _unbroadcast(-g * a / (b * b), b.shape)), "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, p: float):
        a = self.data
        return _make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a_shape = self.shape

        def bw(g):
            full = np.zeros(a_shape)
            np.add.at(full, idx, g)
            return (full,)

        return _make(np.array(self.data[idx]), (self,), bw, "getitem")

    # reductions and reshapes ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a_shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape),)

        return _make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        a_shape = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(a_shape),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int):
        return _make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),), "swapaxes")

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # elementwise -------------------------------------------------------
    def exp(self):
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a)
        return _make(out, (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(self.data)
        return _make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    if y.ndim == 2 and x.ndim > 2:
        # fold batch axes into rows so one GEMM serves the whole batch
        k = x.shape[-1]

        def bw(g):
            ga = g @ y.T if a.requires_grad else None
            gb = x.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb

        with np.errstate(over="ignore", invalid="ignore"):
            out = (x.reshape(-1, k) @ y).reshape(*x.shape[:-1], y.shape[-1])
        return _make(out, (a, b), bw, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, x.shape),
                None if gb is None else _unbroadcast(gb, y.shape))

    with np.errstate(over="ignore", invalid="ignore"):
        out = x @ y
    return _make(out, (a, b), bw, "matmul")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out (False) entries are exactly 0."""
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every position masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax_rows")


def log_softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a * a * a)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

    return _make(out, (x,), bw, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = a.shape[-1]

    def bw(g):
        gx = gain_g = bias_g = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        if gain.requires_grad:
            gain_g = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            bias_g = _unbroadcast(g, bias.shape)
        return gx, gain_g, bias_g

    return _make(out, (x, gain, bias), bw, "layer_norm")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a table along its first axis (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    t_shape = table.shape

    def bw(g):
        full = np.zeros(t_shape)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), bw, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets over the leading axis."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits)
    picked = lp[np.arange(len(targets)), targets]
    return -picked.mean()


def mse(pred: Tensor, targets) -> Tensor:
    diff = _as_tensor(pred).reshape(-1) - Tensor(np.asarray(targets, dtype=np.float64).reshape(-1))
    return (diff * diff).mean()
