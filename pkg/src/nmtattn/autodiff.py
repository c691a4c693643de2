"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op in this module is a plain function over :class:`Tensor` objects.
When a :class:`Tape` is active (``with Tape() as tape:``) and at least one
input is tracked (it ``requires_grad`` or was produced by a recorded op), the
op appends a node holding its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` walks the tape in reverse.

Tensors are immutable: the backing array is marked read-only, so a tensor can
be shared between concurrent evaluations. The active tape lives in a
``ContextVar``, which keeps each thread's evaluation on its own tape.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_DEBUG = True
_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "nmtattn_active_tape", default=None
)


class ShapeError(ValueError):
    """Incompatible operand shapes (a programming error)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, node_id: int | None):
        self.op = op
        self.node_id = node_id
        super().__init__(f"non-finite value produced by op '{op}' (node {node_id})")


def set_debug(enabled: bool) -> None:
    """Toggle the per-op finiteness check (on by default)."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """Immutable n-dimensional float64 array.

    Parameters
    ----------
    data : array_like
        Copied into a fresh read-only float64 array.
    requires_grad : bool
        Leaves with this flag are tracked by any active tape.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("construct", None)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no copy, no check: callers own `arr` and never mutate it afterwards
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the ops of one forward evaluation."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._producer: dict[int, int] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._producer

    def node_of(self, t: Tensor) -> Node | None:
        i = self._producer.get(id(t))
        return None if i is None else self.nodes[i]

    def _record(self, op, inputs, output, backward) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, inputs, output, backward))
        self._producer[id(output)] = nid
        return nid


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    tape = _ACTIVE_TAPE.get()
    nid = None
    if tape is not None and any(tape.tracks(x) for x in inputs):
        nid = tape._record(op, inputs, out, backward)
    if _DEBUG and not np.isfinite(out.data).all():
        raise NonFiniteError(op, nid)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def watch(a) -> Tensor:
    """Detached leaf copy of ``a`` that requires grad (a gradient target)."""
    return Tensor._wrap(_as_tensor(a).data, requires_grad=True)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng is None``."""
    if rate <= 0.0 or rng is None:
        return _as_tensor(a)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor._wrap(keep))


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; 1-D operands allowed."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul: scalar operand")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} are not aligned")
    out = np.matmul(ad, bd)

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = np.asarray(g)
        if bd.ndim == 1:
            g2 = g2[..., None]
        if ad.ndim == 1:
            g2 = g2[..., None, :]
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _emit("slice", np.array(out), (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embedding: id out of range [0, {n})")
    shape = table.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (z,)

    return _emit("embedding", table.data[ids], (table,), backward)


def pick(a, index) -> Tensor:
    """``out[...] = a[..., index[...]]`` along the last axis."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {index.shape} vs {a.shape[:-1]}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]
    shape = a.shape

    def backward(g):
        z = np.zeros(shape)
        np.put_along_axis(z, index[..., None], np.asarray(g)[..., None], axis=-1)
        return (z,)

    return _emit("pick", out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and normalisers


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", y, (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _emit("log_softmax", y, (a,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean token cross-entropy, fused with log-softmax.

    ``logits`` has shape ``(..., V)``; ``targets`` integer ``(...)``;
    ``weights`` (default all ones) masks padding.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ShapeError("cross_entropy: weights sum to zero")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = (nll * w).sum() / total

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / total)[..., None] * g,)

    return _emit("cross_entropy", np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# evaluation / differentiation


class Gradients:
    """Gradient lookup returned by :func:`backward`.

    Indexing with any tensor returns its gradient; tensors off the path to
    the seed (or never seen by the tape) get a zero array of their shape.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(tape: Tape, output: Tensor, seed=None) -> Gradients:
    """Propagate ``seed`` (default ones) from ``output`` back through ``tape``."""
    if not tape.tracks(output):
        raise ValueError("backward: seed output is not on this tape")
    seed = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed}
    node = tape.node_of(output)
    stop = -1 if node is None else node.id
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not tape.tracks(x):
                continue
            key = id(x)
            prev = grads.get(key)
            grads[key] = gx if prev is None else prev + gx
    return Gradients(grads)


def evaluate(program: Callable[..., Any], inputs: dict[str, Tensor]):
    """Run ``program(**inputs)`` on a fresh tape; return ``(outputs, tape)``."""
    with Tape() as tape:
        out = program(**inputs)
    return out, tape


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("grad_check: function must return a scalar")
    analytic = backward(tape, y)[x].reshape(-1) if tape.tracks(y) else np.zeros(x0.size)

    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        numeric[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
