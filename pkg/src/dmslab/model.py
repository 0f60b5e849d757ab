"""Two-layer GQA transformer, small enough to gradient-check end to end.

Positions are learned absolute vectors added to token embeddings (no rotary;
position handling is orthogonal to eviction here). Pre-RMSNorm blocks, ReLU
MLP, untied output head. One eviction gate per (layer, KV head) when gating
is enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import AttentionConfig, ProjectionSet, attend, gate_logits
from .gates import EXPLICIT, REPURPOSED, GateParams, sample_gate
from .masks import build_mask
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_ff: int = 256
    max_seq: int = 512

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_q_heads, self.n_kv_heads)


def sinusoid_table(n_pos: int, d: int, scale: float = 0.1) -> np.ndarray:
    """Multi-frequency sinusoid position table (used as the trainable init;
    adjacent positions start out linearly related, which speeds up learning
    of local attention offsets)."""
    table = np.zeros((n_pos, d))
    pos = np.arange(n_pos)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)
    return table * scale


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, kv, ff = cfg.d_model, cfg.attention().kv_dim, cfg.d_ff

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": w(cfg.vocab, d),
        "pos_emb": Tensor(sinusoid_table(cfg.max_seq, d), requires_grad=True),
        "out_norm.g": Tensor(np.ones(d), requires_grad=True),
        "w_out": w(d, cfg.vocab),
    }
    for i in range(cfg.n_layers):
        params[f"l{i}.att_norm.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"l{i}.wq"] = w(d, d)
        params[f"l{i}.wk"] = w(d, kv)
        params[f"l{i}.wv"] = w(d, kv)
        params[f"l{i}.wo"] = w(d, d)
        params[f"l{i}.mlp_norm.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"l{i}.w1"] = w(d, ff)
        params[f"l{i}.b1"] = Tensor(np.zeros(ff), requires_grad=True)
        params[f"l{i}.w2"] = w(ff, d)
        params[f"l{i}.b2"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def add_gate_params(params: dict[str, Tensor], cfg: ModelConfig, mode: str = EXPLICIT) -> None:
    """Attach zero-initialized gate weights for every layer (explicit mode)."""
    if mode != EXPLICIT:
        return
    for i in range(cfg.n_layers):
        params[f"l{i}.gate.w"] = Tensor(
            np.zeros((cfg.d_model, cfg.n_kv_heads)), requires_grad=True
        )


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in params.items()
    }


def layer_gate(params: dict[str, Tensor], layer: int, mode: str, tau: float) -> GateParams:
    w = params.get(f"l{layer}.gate.w") if mode == EXPLICIT else None
    return GateParams(mode=mode, weights=w, temperature=tau)


@dataclass
class GateRun:
    """Settings for one gated forward pass."""

    mode: str = EXPLICIT
    tau: float = 0.1
    window: int = 16
    variant: str = "delayed"
    deterministic: bool = False
    rounded: bool = False  # binarize decisions (inference-equivalent pass)
    clamp: bool = True
    noise: list[np.ndarray] | None = None  # per-layer logistic noise (T, n_kv)


@dataclass
class ForwardOut:
    logits: Tensor  # (T, vocab)
    alphas: list[Tensor] = field(default_factory=list)  # per layer (T, n_kv)


def forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    pos_offset: int = 0,
    gate: GateRun | None = None,
    neuron_prescale: float | None = None,
) -> ForwardOut:
    """Full-sequence forward. `gate` enables eviction masking; noise, when
    given, must hold one (T, n_kv) array per layer. `neuron_prescale` is the
    pre-phase multiplier on each group's first query neuron (no gating)."""
    ids = np.asarray(ids, dtype=np.int64)
    T = len(ids)
    if pos_offset + T > cfg.max_seq:
        raise ValueError(f"sequence of {T} at offset {pos_offset} exceeds max_seq {cfg.max_seq}")
    acfg = cfg.attention()
    x = nm.add(
        nm.take_rows(params["tok_emb"], ids),
        nm.take_rows(params["pos_emb"], np.arange(pos_offset, pos_offset + T)),
    )
    alphas: list[Tensor] = []
    for i in range(cfg.n_layers):
        proj = ProjectionSet(
            params[f"l{i}.wq"], params[f"l{i}.wk"], params[f"l{i}.wv"], params[f"l{i}.wo"]
        )
        hn = nm.rmsnorm_rows(x, params[f"l{i}.att_norm.g"])
        mask = None
        pre_q = None
        attend_scale = neuron_prescale
        if gate is not None:
            gp = layer_gate(params, i, gate.mode, gate.tau)
            if gp.mode == REPURPOSED:
                pre_q = nm.matmul(hn, proj.w_q)
                glog = gate_logits(hn, None, gp.bias, acfg, precomputed_q=pre_q)
                attend_scale = 0.0
            else:
                glog = gate_logits(hn, gp.weights, gp.bias, acfg)
            alpha = sample_gate(
                glog,
                gp.temperature,
                noise=gate.noise[i] if gate.noise is not None else None,
                deterministic=gate.deterministic or gate.rounded,
            )
            if gate.rounded:
                alpha = Tensor(np.rint(alpha.data))
            alphas.append(alpha)
            mask = build_mask(alpha, gate.window, gate.variant, clamp=gate.clamp)
        att = attend(hn, proj, acfg, mask=mask, precomputed_q=pre_q,
                     first_neuron_scale=attend_scale)
        x = nm.add(x, att)
        mn = nm.rmsnorm_rows(x, params[f"l{i}.mlp_norm.g"])
        # squared ReLU: C1-smooth, so finite-difference oracles stay clean
        r = nm.relu(nm.add(nm.matmul(mn, params[f"l{i}.w1"]), params[f"l{i}.b1"]))
        h1 = nm.mul(r, r)
        x = nm.add(x, nm.add(nm.matmul(h1, params[f"l{i}.w2"]), params[f"l{i}.b2"]))
    xn = nm.rmsnorm_rows(x, params["out_norm.g"])
    return ForwardOut(logits=nm.matmul(xn, params["w_out"]), alphas=alphas)
