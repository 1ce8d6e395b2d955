"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when one is
entered and at least one input requires a gradient; outside a tape every
operation is a plain numpy computation.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "EvaluationError",
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "tanh",
    "relu",
    "absolute",
    "matmul",
    "linear",
    "sum_",
    "mean_pool",
    "reshape",
    "transpose",
    "concat",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "pick",
    "cosine_similarity",
    "l2_norm",
    "masked_mean",
    "grad_check",
]

NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the operation's domain."""


class EvaluationError(ArithmeticError):
    """A computation produced a non-finite value."""


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "molan_active_tape", default=None
)


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

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

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int) -> "Tensor":
        return mean_pool(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named trainable tensor. Its shape never changes after creation."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name

    @property
    def value(self) -> "Parameter":
        return self

    def assign(self, new: np.ndarray) -> None:
        new = np.asarray(new, dtype=np.float64)
        if new.shape != self.data.shape:
            raise DimensionError(
                f"parameter {self.name!r} has shape {self.data.shape}, got {new.shape}"
            )
        self.data = new.copy()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for inputs, output, rule in reversed(self.records):
            if output.grad is None:
                continue
            grads = rule(output.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    g = np.broadcast_to(g, inp.shape)
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((tuple(inputs), out, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def rule(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _emit(out, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient 0 at the kink
    gate = (a.data > 0.0).astype(np.float64)
    return _emit(a.data * gate, (a,), lambda g: (g * gate,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    # np.sign(0) == 0: subgradient 0 at the kink
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sign,))


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), rule)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- reductions and shape ------------------------------------------------


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(
            _norm_axis(ax, a.ndim, "sum") for ax in (axis if isinstance(axis, tuple) else (axis,))
        )
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit(out, (a,), rule)


def mean_pool(x, axis: int) -> Tensor:
    """Arithmetic mean along ``axis``; the axis is removed."""
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim, "mean_pool")
    n = x.shape[ax]
    if n == 0:
        raise DimensionError("mean_pool: empty axis")
    out = x.data.mean(axis=ax)

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape),)

    return _emit(out, (x,), rule)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ax = _norm_axis(axis, tensors[0].ndim, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(out, tensors, rule)


# -- softmax family ------------------------------------------------------


def softmax_lastdim(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_lastdim: empty last dimension in shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), rule)


def log_softmax_lastdim(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax_lastdim: empty last dimension in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), rule)


def pick(x, index) -> Tensor:
    """Select ``x[..., index[...]]`` along the last axis."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index shape {idx.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit(out, (x,), rule)


# -- vector geometry -----------------------------------------------------


def l2_norm(x) -> Tensor:
    """Euclidean norm along the last axis (gradient 0 at the origin)."""
    x = _as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1))
    safe = np.where(out > 0.0, out, 1.0)

    def rule(g):
        return (np.where(out[..., None] > 0.0, g[..., None] * x.data / safe[..., None], 0.0),)

    return _emit(out, (x,), rule)


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between vectors along the last axis.

    Leading axes broadcast. If either norm is below 1e-12 the result is 0
    and no gradient flows through that pair.
    """
    u, v = _as_tensor(u), _as_tensor(v)
    if u.ndim == 0 or v.ndim == 0 or u.shape[-1] != v.shape[-1] or u.shape[-1] < 1:
        raise DimensionError(f"cosine_similarity: length mismatch {u.shape} vs {v.shape}")
    _check_broadcast(u, v, "cosine_similarity")
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    dot = (u.data * v.data).sum(axis=-1)
    ok = (nu >= NORM_FLOOR) & (nv >= NORM_FLOOR)
    denom = np.where(ok, nu * nv, 1.0)
    out = np.where(ok, dot / denom, 0.0)
    out = np.clip(out, -1.0, 1.0)

    def rule(g):
        safe_u = np.where(ok, nu, 1.0)[..., None]
        safe_v = np.where(ok, nv, 1.0)[..., None]
        gate = (g * ok)[..., None]
        c = out[..., None]
        gu = gate * (v.data / (safe_u * safe_v) - c * u.data / (safe_u * safe_u))
        gv = gate * (u.data / (safe_u * safe_v) - c * v.data / (safe_v * safe_v))
        return _unbroadcast(gu, u.shape), _unbroadcast(gv, v.shape)

    return _emit(out, (u, v), rule)


def masked_mean(x, keep: np.ndarray, axis: int = 1) -> Tensor:
    """Mean of ``x`` along ``axis`` over positions where ``keep`` is true.

    ``keep`` has the shape of ``x`` up to and including ``axis``.
    """
    x = _as_tensor(x)
    keep = np.asarray(keep, dtype=np.float64)
    ax = _norm_axis(axis, x.ndim, "masked_mean")
    if keep.shape != x.shape[: ax + 1]:
        raise DimensionError(f"masked_mean: mask shape {keep.shape} vs tensor {x.shape}")
    counts = keep.sum(axis=ax)
    if np.any(counts == 0):
        raise DomainError("masked_mean: a row has no kept positions")
    w = (keep / np.expand_dims(counts, ax)).reshape(keep.shape + (1,) * (x.ndim - ax - 1))
    return sum_(mul(x, w), axis=ax)


# -- gradient checking ---------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-6,
) -> float:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every
    entry of every parameter.
    """
    if not h > 0:
        raise DomainError("grad_check: step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    value = out.item()
    if not math.isfinite(value):
        raise EvaluationError("grad_check: objective is not finite")
    tape.backward(out)

    def evaluate() -> float:
        v = f().item()
        if not math.isfinite(v):
            raise EvaluationError("grad_check: objective is not finite under perturbation")
        return v

    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else np.array(p.grad, copy=True)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
