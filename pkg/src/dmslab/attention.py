"""Grouped-query causal self-attention with optional eviction masking.

Query heads are grouped onto shared KV heads; a MaskSpec carries one decision
column per KV head and every query head in a group sees its group's mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import masks as mk
from . import numerics as nm
from .numerics import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_q_heads: int
    n_kv_heads: int

    def __post_init__(self):
        if self.d_model <= 0 or self.n_q_heads <= 0 or self.n_kv_heads <= 0:
            raise ValueError("attention dims must be positive")
        if self.d_model % self.n_q_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_q_heads {self.n_q_heads}")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(
                f"n_q_heads {self.n_q_heads} not divisible by n_kv_heads {self.n_kv_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def kv_head_of(self, q_head: int) -> int:
        return q_head // self.group_size

    def first_q_head_of(self, kv_head: int) -> int:
        return kv_head * self.group_size


@dataclass
class ProjectionSet:
    """Input projections, stored (in_dim, out_dim) so x @ w applies them."""

    w_q: Tensor  # (d, d)
    w_k: Tensor  # (d, kv_dim)
    w_v: Tensor  # (d, kv_dim)
    w_o: Tensor  # (d, d)

    def check(self, cfg: AttentionConfig) -> None:
        d, kv = cfg.d_model, cfg.kv_dim
        for name, w, shape in (
            ("w_q", self.w_q, (d, d)),
            ("w_k", self.w_k, (d, kv)),
            ("w_v", self.w_v, (d, kv)),
            ("w_o", self.w_o, (d, d)),
        ):
            if w.shape != shape:
                raise ValueError(f"{name} shape {w.shape} != expected {shape}")


def first_neuron_gate_vector(cfg: AttentionConfig, scale: float) -> np.ndarray:
    """Multiplier over query columns: `scale` on each group's first neuron."""
    v = np.ones(cfg.d_model)
    for g in range(cfg.n_kv_heads):
        v[cfg.first_q_head_of(g) * cfg.head_dim] = scale
    return v


def attend(
    h: Tensor,
    proj: ProjectionSet,
    cfg: AttentionConfig,
    mask: mk.MaskSpec | None = None,
    precomputed_q: Tensor | None = None,
    first_neuron_scale: float | None = None,
) -> Tensor:
    """Causal attention over a whole sequence; h is (T, d).

    When a mask is present, its decision penalties are added to the scaled
    scores before softmax; the diagonal is never masked. first_neuron_scale
    multiplies the first query neuron of each group (the repurposed-neuron
    path; 0.0 removes the gate neuron from the attention computation).
    """
    T = h.shape[0]
    if T < 1:
        raise ValueError("attend needs at least one token")
    if mask is not None:
        if mask.length != T:
            raise ValueError(f"mask covers {mask.length} decisions, sequence has {T}")
        if mask.n_heads != cfg.n_kv_heads:
            raise ValueError(
                f"mask has {mask.n_heads} head columns, config has {cfg.n_kv_heads} KV heads"
            )
    q = precomputed_q if precomputed_q is not None else nm.matmul(h, proj.w_q)
    if first_neuron_scale is not None:
        q = nm.mul(q, Tensor(first_neuron_gate_vector(cfg, first_neuron_scale)))
    k = nm.matmul(h, proj.w_k)
    v = nm.matmul(h, proj.w_v)
    dh = cfg.head_dim
    inv_scale = 1.0 / math.sqrt(dh)

    penalties: list[Tensor | None] = []
    for g in range(cfg.n_kv_heads):
        penalties.append(mk.penalty_column(mask, g) if mask is not None else None)
    zero_pen = Tensor(np.zeros(T))

    outs = []
    for qi in range(cfg.n_q_heads):
        g = cfg.kv_head_of(qi)
        qh = nm.slice_cols(q, qi * dh, (qi + 1) * dh)
        kh = nm.slice_cols(k, g * dh, (g + 1) * dh)
        vh = nm.slice_cols(v, g * dh, (g + 1) * dh)
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), inv_scale)
        if mask is not None:
            scores = nm.causal_decision_mask(scores, penalties[g], mask.window, mask.variant)
        else:
            scores = nm.causal_decision_mask(scores, zero_pen, T + 1)
        weights = nm.softmax_rows(scores)
        outs.append(nm.matmul(weights, vh))
    return nm.matmul(nm.concat_cols(outs), proj.w_o)


def gate_logits(
    h: Tensor,
    gate_w: Tensor | None,
    bias: float,
    cfg: AttentionConfig,
    precomputed_q: Tensor | None = None,
) -> Tensor:
    """Pre-sigmoid eviction logits, one column per KV head; h is (T, d).

    Explicit mode reads h @ gate_w + bias with gate_w of shape (d, n_kv).
    Repurposed-neuron mode (gate_w=None) reads neuron 0 of each group's
    first query head from precomputed_q instead, plus the same bias.
    """
    if gate_w is not None:
        if gate_w.shape != (cfg.d_model, cfg.n_kv_heads):
            raise ValueError(
                f"gate weights shape {gate_w.shape} != ({cfg.d_model}, {cfg.n_kv_heads})"
            )
        return nm.add_const(nm.matmul(h, gate_w), bias)
    if precomputed_q is None:
        raise ValueError("repurposed-neuron gating requires the query projection")
    cols = [
        nm.slice_cols(
            precomputed_q,
            cfg.first_q_head_of(g) * cfg.head_dim,
            cfg.first_q_head_of(g) * cfg.head_dim + 1,
        )
        for g in range(cfg.n_kv_heads)
    ]
    return nm.add_const(nm.concat_cols(cols), bias)
