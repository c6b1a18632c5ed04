"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records one node on the active :class:`Tape`.
:func:`backward` replays the tape in reverse execution order, so gradient
accumulation into a tensor consumed by several ops is additive.

Ops broadcast like numpy; gradients are summed back onto the input shape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

LEAKY_SLOPE = 0.01
LAYER_NORM_EPS = 1e-5

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


@dataclass
class Node:
    out: "Tensor"
    parents: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise BackwardError("cannot record on a tape that was already differentiated; call reset()")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


_tape_stack: list[Tape] = [Tape()]
_grad_enabled = [True]


def current_tape() -> Tape:
    tape = _tape_stack[-1]
    if tape.consumed and len(_tape_stack) == 1:
        # the implicit default tape renews itself after a backward pass
        tape = _tape_stack[0] = Tape()
    return tape


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record ops onto ``tape`` (a fresh one by default) for the block."""
    tape = Tape() if tape is None else tape
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """A float64 array, optionally tracked for gradients.

    Leaf tensors created with ``requires_grad=True`` act as parameters: their
    ``grad`` slot is a same-shape accumulator that starts at zero.
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(self.values) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(values)
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = current_tape()
        out._tape = tape
        tape.record(Node(out, tuple(parents), backward_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * out / b.values, b.shape)))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.values ** exponent, (x,),
                 lambda g: (g * exponent * x.values ** (exponent - 1.0),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.values)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero wherever the floor is active."""
    x = as_tensor(x)
    keep = x.values > floor
    return _make(np.where(keep, x.values, floor), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def transpose(x, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    x = as_tensor(x)
    i, j = axes
    return _make(np.swapaxes(x.values, i, j), (x,), lambda g: (np.swapaxes(g, i, j),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.expand_dims(x.values, axis), (x,), lambda g: (np.squeeze(g, axis=axis),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.values[index], (x,), backward)


def take_rows(table, indices) -> Tensor:
    """Gather rows of a 2-D table: output shape is ``indices.shape + (d,)``."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.values[idx], (table,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.values for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.values > 0, 1.0, slope)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def elu(x) -> Tensor:
    x = as_tensor(x)
    neg = np.expm1(np.minimum(x.values, 0.0))
    out = np.where(x.values > 0, x.values, neg)
    slope = np.where(x.values > 0, 1.0, neg + 1.0)
    return _make(out, (x,), lambda g: (g * slope,))


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.values / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.values ** 2)
    return _make(x.values * cdf, (x,), lambda g: (g * (cdf + x.values * pdf),))


_ACTIVATIONS = {"leaky_relu": leaky_relu, "elu": elu, "gelu": gelu}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# normalisation, pooling, softmax


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable, True = keep) removes entries from the
    normaliser; they come out as exact zeros. A row with nothing kept is all
    zeros.
    """
    x = as_tensor(x)
    logits = x.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        logits = np.where(mask, logits, -np.inf)
    peak = np.max(logits, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    expd = np.exp(logits - peak)
    total = expd.sum(axis=-1, keepdims=True)
    out = np.divide(expd, total, out=np.zeros_like(expd), where=total > 0)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - np.max(x.values, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (m, n) logits and m labels, got {logits.shape}, {labels.shape}")
    if labels.size == 0:
        raise ValueError("cross_entropy over an empty label set")
    rows = np.arange(labels.size)
    picked = getitem(log_softmax(logits), (rows, labels))
    return mul(sum(picked), -1.0 / labels.size)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.values.mean(axis=-1, keepdims=True)
    centred = x.values - mu
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    out = normed * gain.values + bias.values

    def backward(g):
        gn = g * gain.values
        gx = inv_std / d * (d * gn - gn.sum(axis=-1, keepdims=True)
                            - normed * np.sum(gn * normed, axis=-1, keepdims=True))
        return gx, _unbroadcast(g * normed, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), backward)


def l2_normalize(x, axis: int, scale: float = 1.0, floor: float = 1e-12) -> Tensor:
    """x / (scale * max(||x||_2, floor)) along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.values ** 2, axis=axis, keepdims=True))
    active = norm > floor
    safe = np.where(active, norm, floor)
    out = x.values / (scale * safe)

    def backward(g):
        proj = np.sum(g * x.values, axis=axis, keepdims=True)
        # below the floor the denominator is constant
        gx = g / (scale * safe) - np.where(active, x.values * proj / (scale * safe ** 3), 0.0)
        return (gx,)

    return _make(out, (x,), backward)


def lp_pool(x, p: float, axis: int) -> Tensor:
    """(sum_v x_v^p)^(1/p) over ``axis`` for nonnegative inputs."""
    x = as_tensor(x)
    if p < 1:
        raise DomainError(f"lp_pool exponent must be >= 1, got {p}")
    if np.any(x.values < 0):
        raise DomainError("lp_pool requires nonnegative inputs")
    if p == 1:
        return sum(x, axis=axis)
    powered = np.sum(x.values ** p, axis=axis, keepdims=True)
    pooled = powered ** (1.0 / p)

    def backward(g):
        g = np.expand_dims(g, axis)
        ratio = np.divide(x.values, pooled, out=np.zeros_like(x.values), where=pooled > 0)
        return (g * ratio ** (p - 1.0),)

    return _make(np.squeeze(pooled, axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# reverse pass and optimiser


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.values.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return
    if tape.consumed:
        raise BackwardError("backward already ran on this tape; reset it before differentiating again")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    tape.consumed = True
    tape.nodes.clear()


class Adam:
    """Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 frozen_rows: dict[int, Sequence[int]] | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.frozen_rows = frozen_rows or {}
        self.steps = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for i, p in enumerate(self.params):
            g = p.grad
            rows = self.frozen_rows.get(id(p))
            if rows:
                g = g.copy()
                g[list(rows)] = 0.0
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            if self.lr:
                update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
                if rows:
                    update[list(rows)] = 0.0
                p.values = p.values - update
            p.zero_grad()


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.values``."""
    param.values = np.ascontiguousarray(param.values)
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> dict[str, float]:
    """Relative error between tape gradients and central differences per parameter."""
    for p in params:
        p.zero_grad()
    with recording():
        loss = fn()
        backward(loss)
    report = {}
    for i, p in enumerate(params):
        numeric = numerical_gradient(fn, p, h)
        report[p.name or f"param{i}"] = relative_error(p.grad, numeric)
    return report
