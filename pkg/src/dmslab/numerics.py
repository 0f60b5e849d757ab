"""Dense float64 tensors with a per-pass reverse-mode tape.

Everything runs at 64-bit so test tolerances are meaningful. Recording is
opt-in: ops executed outside an active tape are plain forward computations
(used for teacher passes and inference). The tape is a flat list of nodes in
creation order; `backward` replays it once in reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dmslab_active_tape", default=None
)


class Tensor:
    """A shaped buffer of float64 values plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are accepted where convenient
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return add_const(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return add_const(self, -float(other))
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "Tensor":
        return scale(self, 1.0 / float(c))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @contextlib.contextmanager
    def active(self):
        token = _ACTIVE_TAPE.set(self)
        try:
            yield self
        finally:
            _ACTIVE_TAPE.reset(token)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    if any(p.requires_grad or p._on_tape for p in parents):
        out._on_tape = True
        tape.nodes.append(_Node(out, parents, vjp))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Populate leaf gradients with d(root)/d(leaf) by replaying the tape."""
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    root._accum_grad(np.ones_like(root.data))
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is not None and (parent.requires_grad or parent._on_tape):
                parent._accum_grad(pg)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} @ {b.shape} "
            f"(inner dimensions must agree)"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    # stable two-sided form
    x = a.data
    ex = np.exp(-np.abs(x))
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)))

    def vjp(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise floor; clamped entries get zero gradient."""
    out = Tensor(np.maximum(a.data, lo))
    return _record(out, (a,), lambda g: (g * (a.data > lo),))


def clip_max(a: Tensor, hi: float) -> Tensor:
    """Elementwise ceiling; clamped entries get zero gradient."""
    out = Tensor(np.minimum(a.data, hi))
    return _record(out, (a,), lambda g: (g * (a.data < hi),))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max-subtraction; -inf entries map to exactly 0.

    A fully masked row (all -inf) has no distribution and is rejected.
    """
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("softmax_rows: a row is entirely -inf (no visible token)")
    e = np.exp(d - m)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def vjp(g):
        y = out.data
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("log_softmax_rows: a row is entirely -inf")
    z = d - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)

    def vjp(g):
        y = np.exp(out.data)
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), vjp)


def rmsnorm_rows(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row RMS normalization scaled by a learned gain vector."""
    d = x.data
    n = d.shape[-1]
    s = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    xhat = d * s
    out = Tensor(xhat * gain.data)

    def vjp(g):
        u = g * gain.data
        dx = s * (u - d * (s * s / n) * (u * d).sum(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        return dx, dgain

    return _record(out, (x, gain), vjp)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), vjp)


def take_per_row(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[t] = x[t, ids[t]] — used for next-token log-likelihood."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, ids])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[rows, ids] = g
        return (gx,)

    return _record(out, (x,), vjp)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(a.data[:, lo:hi])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[:, lo:hi] = g
        return (ga,)

    return _record(out, (a,), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def vjp(g):
        grads, lo = [], 0
        for w in widths:
            grads.append(g[:, lo : lo + w])
            lo += w
        return tuple(grads)

    return _record(out, tuple(parts), vjp)


def causal_decision_mask(
    scores: Tensor, penalties: Tensor, window: int, variant: str = "delayed"
) -> Tensor:
    """Add the causal mask and per-key eviction penalties to raw scores.

    Entry (i, j) of the result is:
      -inf                      if j > i             (future token)
      scores[i,j]               if j <= i < j+window (grace window, incl. diagonal)
      scores[i,j] + penalty     if i >= j+window

    where penalty is penalties[j] for the "delayed" variant (the key's own
    decision) and penalties[j+window] for "immediate" (the decision made at
    execution time; keys whose decision index falls past the end of the
    sequence are never penalized). The full T x T mask is derived on the fly
    from the penalty vector and is not part of any persistent state.
    """
    T = scores.shape[0]
    if scores.shape != (T, T):
        raise ValueError(f"scores must be square, got {scores.shape}")
    if penalties.shape != (T,):
        raise ValueError(f"penalties must have shape ({T},), got {penalties.shape}")
    if window < 1:
        raise ValueError("window must be >= 1")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    if variant == "delayed":
        sel = i >= j + window
        pen = np.where(sel, penalties.data[None, :], 0.0)
        pen_index = np.broadcast_to(j, (T, T))
    elif variant == "immediate":
        sel = (i >= j + window) & (j + window < T)
        pen_cols = penalties.data[np.minimum(j[0] + window, T - 1)]
        pen = np.where(sel, pen_cols[None, :], 0.0)
        pen_index = np.broadcast_to(j + window, (T, T))
    else:
        raise ValueError(f"unknown mask variant: {variant!r}")
    out = Tensor(np.where(j > i, -np.inf, scores.data + pen))

    def vjp(g):
        gs = np.where(j > i, 0.0, g)
        gp = np.zeros(T)
        np.add.at(gp, pen_index[sel], gs[sel])
        return gs, gp

    return _record(out, (scores, penalties), vjp)
