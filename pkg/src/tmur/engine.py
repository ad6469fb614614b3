"""A small tape-based reverse-mode differentiation core over 2-D float64 arrays.

Operations executed inside an active :class:`Tape` are recorded together with
the activations their backward pass needs.  ``Tape.backward`` replays the
records in reverse order exactly once.  Outside a tape the same functions
simply compute forward values, which is what inference uses.

    with Tape() as tape:
        y = softplus(linear(x, w, b))
    tape.backward(sum_all(y))
"""

from __future__ import annotations

import math
import threading
import zlib
from typing import Callable, Sequence

import numpy as np

from tmur import special
from tmur.evidential import DomainError


class ShapeError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # arithmetic sugar for composites
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor; gradients accumulate into ``grad``."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered log of primitive applications for one forward/backward pair."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeStateError("tape already consumed")
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        self.records.append((out, inputs, backward_fn))

    def backward(self, output: Tensor, seed=None) -> None:
        if self.consumed:
            raise TapeStateError("backward already ran on this tape")
        if seed is None:
            if output.data.size != 1:
                raise ShapeError("a seed gradient is required for non-scalar outputs")
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64).reshape(output.shape)
        self.consumed = True

        if output.is_leaf:
            if output.requires_grad:
                output.grad += seed
            self.records.clear()
            return

        pending = {id(output): seed}
        for out, inputs, backward_fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t.grad += gi
                elif id(t) in pending:
                    pending[id(t)] = pending[id(t)] + gi
                else:
                    pending[id(t)] = gi
        self.records.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.is_leaf = True
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    """max(a, 0); the subgradient at 0 is taken as 0."""
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        # sigmoid, split by sign to avoid overflow
        e = np.exp(-np.abs(d))
        sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _emit(out, (x,), backward)


def digamma(x: Tensor) -> Tensor:
    return _emit(special.digamma(x.data), (x,), lambda g: (g * special.trigamma(x.data),))


# ---------------------------------------------------------------- reductions / reshaping


def sum_all(a: Tensor) -> Tensor:
    return _emit(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def row_sum(a: Tensor) -> Tensor:
    return _emit(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def col_mean(a: Tensor) -> Tensor:
    n = a.shape[0]
    return _emit(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of equally tall tensors."""
    tensors = [_as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat needs equal row counts, got {sorted(rows)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def take_columns(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick column ``index[i]`` from row ``i``; returns ``B x 1``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g[:, 0]
        return (out,)

    return _emit(a.data[rows, index][:, None], (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    x = _as_tensor(x)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is None:
        return _emit(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g))
    if bias.shape != (1, weight.shape[1]):
        raise ShapeError(f"linear: bias shape {bias.shape} != (1, {weight.shape[1]})")
    return _emit(
        out + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0, keepdims=True)),
    )


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[1]
    if gain.shape != (1, d) or shift.shape != (1, d):
        raise ShapeError(f"layer_norm affine shapes must be (1, {d})")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv_std

    def backward(g):
        gx = g * gain.data
        dx = inv_std * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit(xhat * gain.data + shift.data, (x, gain, shift), backward)


def softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise ``softmax(logits / tau)``."""
    if not (tau > 0 and math.isfinite(tau)):
        raise DomainError(f"temperature must be positive, got {tau}")
    z = (logits.data - logits.data.max(axis=1, keepdims=True)) / tau
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)) / tau,)

    return _emit(p, (logits,), backward)


def l2_normalize_rows(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Unit-norm rows; rows with norm below ``floor`` map to zero."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    live = norms >= floor
    safe = np.where(live, norms, 1.0)
    y = np.where(live, x.data / safe, 0.0)

    def backward(g):
        dx = (g - y * (g * y).sum(axis=1, keepdims=True)) / safe
        return (np.where(live, dx, 0.0),)

    return _emit(y, (x,), backward)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product, ``B x 1``."""
    if a.shape != b.shape:
        raise ShapeError(f"row_dot shape mismatch {a.shape} vs {b.shape}")
    return row_sum(mul(a, b))


class AttentionParams:
    """Square query/key/value/output projections of a single attention head."""

    def __init__(self, query: Tensor, key: Tensor, value: Tensor, output: Tensor):
        d = query.shape[0]
        for m in (query, key, value, output):
            if m.shape != (d, d):
                raise ShapeError(f"attention projections must be {d}x{d}, got {m.shape}")
        self.query, self.key, self.value, self.output = query, key, value, output

    @property
    def dim(self) -> int:
        return self.query.shape[0]


def cross_attention(query: Tensor, keys: Sequence[Tensor], values: Sequence[Tensor], proj: AttentionParams) -> Tensor:
    """Scaled dot-product attention of one query row against ``V`` key/value rows.

    Batched over samples: ``query`` is ``B x d`` and ``keys[j]`` / ``values[j]``
    are the ``B x d`` rows of the ``j``-th key/value, so sample ``b`` attends
    over ``{keys[j][b]}``.
    """
    d = proj.dim
    if len(keys) != len(values) or not keys:
        raise ShapeError("need the same positive number of keys and values")
    for t in (query, *keys, *values):
        if t.shape[1] != d or t.shape[0] != query.shape[0]:
            raise ShapeError(f"attention inputs must be {query.shape[0]} x {d}, got {t.shape}")
    q = matmul(query, proj.query)
    scores = concat([row_dot(q, matmul(k, proj.key)) for k in keys])
    weights = softmax(scale(scores, 1.0 / math.sqrt(d)))
    mixed = None
    for j, v in enumerate(values):
        term = mul(take_slice(weights, j), matmul(v, proj.value))
        mixed = term if mixed is None else add(mixed, term)
    return matmul(mixed, proj.output)


def take_slice(a: Tensor, col: int) -> Tensor:
    """Column ``col`` of ``a`` as a ``B x 1`` tensor."""

    def backward(g):
        out = np.zeros_like(a.data)
        out[:, col] = g[:, 0]
        return (out,)

    return _emit(a.data[:, col : col + 1].copy(), (a,), backward)


# ---------------------------------------------------------------- initialisation


def stable_hash(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def glorot_uniform(shape: tuple[int, int], seed: int, name: str) -> np.ndarray:
    rng = np.random.default_rng([seed, stable_hash("init"), stable_hash(name)])
    a = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)
