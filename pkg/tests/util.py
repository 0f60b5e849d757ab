"""Shared oracle helpers: central finite differences and naive references."""

from __future__ import annotations

import numpy as np

from dmslab.numerics import Tape, Tensor, backward


def central_diff(f, tensors: dict[str, Tensor], name: str, idx: tuple, h: float = 1e-4) -> float:
    """d f / d tensors[name][idx] by central differences; f takes no args."""
    t = tensors[name]
    orig = t.data[idx]
    t.data[idx] = orig + h
    up = f()
    t.data[idx] = orig - h
    down = f()
    t.data[idx] = orig
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(build_loss, tensors: dict[str, Tensor], coords: list[tuple[str, tuple]],
               h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    build_loss() runs a fresh forward and returns the scalar loss Tensor; it
    must be a pure function of the tensors' current data.
    """
    for t in tensors.values():
        t.grad = None
    tape = Tape()
    with tape.active():
        loss = build_loss()
    backward(tape, loss)
    worst = 0.0
    f = lambda: build_loss().item()
    for name, idx in coords:
        analytic = tensors[name].grad[idx] if tensors[name].grad is not None else 0.0
        numeric = central_diff(f, tensors, name, idx, h)
        worst = max(worst, rel_err(float(analytic), float(numeric)))
    return worst


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference with fixed left-to-right summation."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out
