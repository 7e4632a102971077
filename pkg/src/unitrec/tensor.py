"""Dense float64 tensors with tape-based reverse-mode autodiff.

Operations only record themselves while a :class:`Tape` is active, so plain
forward passes (evaluation, finite differences) allocate no graph at all::

    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(loss, tape)
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("_data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # arithmetic on 0-d arrays yields numpy scalars; keep an ndarray either way
        self._data = np.asarray(value, dtype=DTYPE)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index: int):
        return select(self, index)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=DTYPE))


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations.

    Nodes are appended as operations run, so inputs always precede their
    consumers and a reverse sweep is a valid topological order.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self.nodes)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = Tape.current()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, parents, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf that requires grad.

    Leaf gradients accumulate across calls; the tape is cleared afterwards.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.nodes.clear()


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (modifies ``x`` in place, then restores)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=DTYPE)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last dimension."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an attention mask) broadcast over leading axes."""
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape[a.ndim - c.ndim :]:
        raise ShapeError(f"add_constant: constant of shape {c.shape} does not trail {a.shape}")
    return _make(a.data + c, (a,), lambda g: (g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), grad_fn)


# ---------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def select(a: Tensor, index: int) -> Tensor:
    """``a[index]`` along the first axis."""
    n = a.shape[0]
    if not -n <= index < n:
        raise IndexError(f"select: index {index} out of range for first axis of size {n}")

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), grad_fn)


def take_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor; used for embedding lookup."""
    idx = np.asarray(rows, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(np.flatnonzero((idx < 0) | (idx >= n))[0])
        raise IndexError(f"take_rows: id {int(idx[bad])} at position {bad} out of range [0, {n})")

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), grad_fn)


def stack(items: Sequence[Tensor]) -> Tensor:
    if not items:
        raise ValueError("stack: empty input")
    shape = items[0].shape
    for t in items:
        if t.shape != shape:
            raise ShapeError(f"stack: mixed shapes {shape} and {t.shape}")
    data = np.stack([t.data for t in items])
    return _make(data, tuple(items), lambda g: tuple(g[i] for i in range(len(items))))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), grad_fn)


def _log_softmax(data: np.ndarray) -> np.ndarray:
    z = data - data.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_lastdim(x: Tensor) -> Tensor:
    y = _log_softmax(x.data)

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), grad_fn)


def log_softmax_gather(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Per-row log-probability of ``targets`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax_gather expects T x V logits, got {logits.shape}")
    t_len, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (t_len,):
        raise ShapeError(f"log_softmax_gather: {tgt.size} targets for {t_len} rows")
    bad = np.flatnonzero((tgt < 0) | (tgt >= vocab))
    if bad.size:
        pos = int(bad[0])
        raise IndexError(f"target {int(tgt[pos])} at position {pos} outside vocabulary of {vocab}")
    logp = _log_softmax(logits.data)
    rows = np.arange(t_len)

    def grad_fn(g):
        dx = -np.exp(logp) * g[:, None]
        dx[rows, tgt] += g
        return (dx,)

    return _make(logp[rows, tgt], (logits,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    axes = tuple(range(x.ndim - 1))

    def grad_fn(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gd + bias.data, (x, gain, bias), grad_fn)
