"""Compact eviction masks: a decision vector per KV head plus a window size.

The additive T x T mask is always derived on the fly. Visibility of key j to
query i under the delayed policy:

    0              if i < j + w   (grace window; the diagonal i == j is here)
    log(1 - a_j)   if i >= j + w

The "immediate" variant is the ablation policy where the decision executed at
step j+w is the one *made* at step j+w, so the penalty for key j reads
decision index j+w instead of j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

# Decisions at or above this value would produce log(1-a) = -inf; training
# clamps below it so gradients through the mask stay finite. Exact -inf is
# reserved for binary decision vectors (clamp=False).
ALPHA_CEILING = 1.0 - 1e-12


@dataclass
class MaskSpec:
    """decisions: (T, n_kv_heads) values in [0, 1]; window >= 1."""

    decisions: Tensor
    window: int
    variant: str = "delayed"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("mask window must be >= 1")
        if self.decisions.data.ndim == 1:
            self.decisions = Tensor(
                self.decisions.data[:, None], requires_grad=self.decisions.requires_grad
            )
        d = self.decisions.data
        if np.any(d < 0.0) or np.any(d > 1.0):
            raise ValueError("eviction decisions must lie in [0, 1]")
        if self.variant not in ("delayed", "immediate"):
            raise ValueError(f"unknown mask variant: {self.variant!r}")

    @property
    def length(self) -> int:
        return self.decisions.shape[0]

    @property
    def n_heads(self) -> int:
        return self.decisions.shape[1]


def build_mask(
    decisions: Tensor | np.ndarray,
    window: int,
    variant: str = "delayed",
    clamp: bool = True,
) -> MaskSpec:
    """Wrap per-key decisions into a MaskSpec, clamping away exact 1.0.

    clamp=True is the training path (finite penalties, differentiable);
    clamp=False keeps exact zeros/ones so binary vectors yield true -inf
    entries for eviction-equivalence checks.
    """
    if not isinstance(decisions, Tensor):
        decisions = Tensor(decisions)
    if np.any(decisions.data < 0.0) or np.any(decisions.data > 1.0):
        raise ValueError("eviction decisions must lie in [0, 1]")
    if clamp:
        decisions = nm.clip_max(decisions, ALPHA_CEILING)
    return MaskSpec(decisions=decisions, window=window, variant=variant)


def penalty_column(mask: MaskSpec, head: int) -> Tensor:
    """log(1 - a) for one KV head, as a (T,) tensor on the active tape."""
    a = nm.slice_cols(mask.decisions, head, head + 1)
    col = nm.log(nm.add_const(nm.scale(a, -1.0), 1.0))
    out = Tensor(col.data[:, 0])

    def vjp(g):
        return (g[:, None],)

    return nm._record(out, (col,), vjp)


def visibility_matrix(decisions: np.ndarray, window: int, variant: str = "delayed") -> np.ndarray:
    """Dense additive mask for one head, for oracle tests only (never used by
    the attention path)."""
    a = np.asarray(decisions, dtype=np.float64)
    T = a.shape[0]
    m = np.zeros((T, T))
    with np.errstate(divide="ignore"):
        pen = np.log1p(-a)
    for i_ in range(T):
        for j_ in range(T):
            if j_ > i_:
                m[i_, j_] = -np.inf
            elif i_ >= j_ + window:
                if variant == "delayed":
                    m[i_, j_] = pen[j_]
                elif j_ + window < T:
                    m[i_, j_] = pen[j_ + window]
    return m
