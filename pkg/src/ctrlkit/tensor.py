"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations the conditional-transformer stack
needs (matmul, layernorm, row softmax, relu, embedding lookup, head
concatenation, dropout, cross-entropy) plus ``add``/``scale``/``tsum`` for
glue. Forward values are plain numpy arrays; gradients are recorded on an
explicit :class:`Tape` and replayed in exact reverse recording order.

float32 is the working precision. Build tensors with ``dtype=np.float64``
when running finite-difference oracles.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "matmul",
    "transpose",
    "add",
    "scale",
    "relu",
    "tsum",
    "softmax_rows",
    "layernorm",
    "cross_entropy",
    "embed_lookup",
    "concat_heads",
    "dropout",
    "counter_rng",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense n-dimensional array that can participate in a gradient tape.

    ``data`` is row-major (numpy default). ``grad`` is lazily allocated with
    the same shape and dtype the first time a backward pass reaches this
    tensor. Tensors written by an op are treated as immutable; only the
    optimizer mutates parameter ``data`` in place, between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Ops append themselves in execution order, so the list is topologically
    sorted by construction; ``backward`` walks it strictly in reverse. A tape
    is single-threaded and one-shot.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate grads into every
        requires_grad tensor reachable from ``loss`` through this tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _wrap(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2d @ 2d, 3d @ 2d (shared right operand over
    the leading batch axis) and 3d @ 3d (per-slice)."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul supports rank 2 or 3 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise ShapeError(f"matmul does not support 2d @ 3d: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if b.ndim == 2:
                _accum(a, g @ b.data.T)
            else:
                _accum(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            if a.ndim == 2:
                _accum(b, a.data.T @ g)
            elif b.ndim == 2:
                k = a.shape[-1]
                n = g.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _wrap(out_data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    out_data = x.data.transpose(axes)

    def backward(g: np.ndarray) -> None:
        _accum(x, g.transpose(axes))

    return _wrap(out_data, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes do not broadcast: {a.shape} + {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _wrap(out_data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data * s

    def backward(g: np.ndarray) -> None:
        _accum(x, g * s)

    return _wrap(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * (x.data > 0))

    return _wrap(out_data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum all entries to a scalar (used to build test losses)."""
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _wrap(out_data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction.

    ``-inf`` entries are treated as masked and map to exactly 0 probability;
    a row must keep at least one finite entry.
    """
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(x, (g - inner) * out_data)

    return _wrap(out_data, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to zero mean / unit variance,
    then apply the per-feature affine transform."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must be shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)

    return _wrap(out_data, (x, gain, bias), backward)


def cross_entropy(scores: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax(scores)[target].

    ``scores`` has shape [..., V]; ``targets`` is an integer array matching
    the leading shape.
    """
    v = scores.shape[-1]
    t = np.asarray(targets)
    if t.shape != scores.shape[:-1]:
        raise ShapeError(f"targets shape {t.shape} does not match scores {scores.shape}")
    flat = scores.data.reshape(-1, v)
    idx = t.reshape(-1)
    if idx.size == 0:
        raise ShapeError("cross_entropy needs at least one target position")
    if idx.min() < 0 or idx.max() >= v:
        bad = idx[(idx < 0) | (idx >= v)][0]
        raise IndexError(f"target id {int(bad)} out of range for vocabulary of size {v}")
    n = flat.shape[0]
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), idx] - lse
    out_data = np.asarray(-logp.mean(), dtype=scores.data.dtype)

    def backward(g: np.ndarray) -> None:
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), idx] -= 1.0
        _accum(scores, (p * (g / n)).reshape(scores.shape))

    return _wrap(out_data, (scores,), backward)


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` ([V, d]) at integer ``ids`` (any shape)."""
    idx = np.asarray(ids)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        bad = idx[(idx < 0) | (idx >= v)].reshape(-1)[0]
        raise IndexError(f"token id {int(bad)} out of range for vocabulary of size {v}")
    out_data = table.data[idx]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _wrap(out_data, (table,), backward)


def concat_heads(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate per-head outputs along the last axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_heads needs at least one part")
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., offset : offset + w])
            offset += w

    return _wrap(out_data, tuple(parts), backward)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero entries with probability ``p`` and rescale by 1/(1-p).

    Identity (the input tensor itself) when not training or ``p == 0``, so
    eval-mode forward passes are bitwise reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= p
    factor = 1.0 / (1.0 - p)
    out_data = x.data * keep * np.asarray(factor, dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * keep * factor)

    return _wrap(out_data, (x,), backward)


def counter_rng(seed: int, *words: int) -> np.random.Generator:
    """Counter-based generator: same (seed, words) always yields the same
    stream, independent of call order. Used to key dropout masks by
    (seed, step, layer, slot) and batch choice by (seed, step)."""
    if len(words) > 4:
        raise ValueError("counter_rng takes at most 4 counter words")
    counter = [int(w) & 0xFFFFFFFFFFFFFFFF for w in words] + [0] * (4 - len(words))
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF, counter=counter))
