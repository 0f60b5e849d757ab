"""Incremental decoding over the paged cache.

Two entry points: SingleLayerEngine drives one attention layer over given
hidden states (the surface the mask/eviction equivalence oracles exercise),
and ModelEngine runs the full toy transformer token by token for generation.

Per decode step, in order: compute the layer's keys/values and eviction
decisions; execute immediate evictions; drop entries whose deadline has
arrived; append the new entry (deadline-stamped when marked); attend over
the live set (or the policy's page selection); let weight-based policies
evict; then account reads and the post-step live count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig
from .gates import EXPLICIT
from .kvcache import PagedKVCache, ReadLedger
from .model import ModelConfig
from .policies import Policy, VanillaPolicy

RMS_EPS = 1e-6


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    s = 1.0 / np.sqrt((x * x).mean() + RMS_EPS)
    return (x * s) * gain


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass
class StepAccount:
    reads: float  # entries attended, mean over this layer's heads
    live: float  # post-step live entries, mean over heads
    mem: float  # live plus any page-metadata overhead


def layer_attend_step(
    t: int,
    h: np.ndarray,
    q_attend: np.ndarray,
    k_row: np.ndarray,
    v_row: np.ndarray,
    cfg: AttentionConfig,
    policy: Policy,
    stores,
    window: int,
    q_gate: np.ndarray | None = None,
) -> tuple[np.ndarray, StepAccount]:
    """One cached-attention step for one layer; returns the (d,) context
    (pre output-projection) and the step's read/memory accounting.

    q_gate is the unmasked query row for repurposed-neuron gating; attention
    itself uses q_attend.
    """
    dh = cfg.head_dim
    decisions = policy.decisions(t, h, q_gate if q_gate is not None else q_attend)
    policy.pre_step(t, stores)
    for s in stores:
        s.remove_due(t)
    for g in range(cfg.n_kv_heads):
        deadline = None
        if decisions is not None and decisions[g] >= 0.5:
            deadline = t + window
        policy.append(stores[g], g, k_row[g * dh : (g + 1) * dh],
                      v_row[g * dh : (g + 1) * dh], t, deadline)
    q_heads = [q_attend[i * dh : (i + 1) * dh] for i in range(cfg.n_q_heads)]
    selection = policy.select(t, q_heads, stores, cfg.kv_head_of)

    gathered = [s.gather() for s in stores]
    outs = np.zeros((cfg.n_q_heads, dh))
    weight_acc: np.ndarray | None = None
    ref_positions: np.ndarray | None = None
    inv_scale = 1.0 / math.sqrt(dh)
    for qi in range(cfg.n_q_heads):
        g = cfg.kv_head_of(qi)
        K, V, pos = gathered[g]
        if selection is not None:
            keep = np.isin(pos, selection["per_q"][qi])
            K, V, pos = K[keep], V[keep], pos[keep]
        if len(pos) == 0:
            raise ValueError(f"attention over empty head {g} at step {t}")
        w = _softmax((K @ q_heads[qi]) * inv_scale)
        outs[qi] = w @ V
        if policy.needs_weights:
            if weight_acc is None:
                ref_positions = pos
                weight_acc = np.zeros((cfg.n_q_heads, len(pos)))
            if not np.array_equal(pos, ref_positions):
                raise ValueError("weight-based policies require head-synced caches")
            weight_acc[qi] = w
    if policy.needs_weights:
        policy.post_attend(t, weight_acc, ref_positions, stores)

    live = float(np.mean([s.live for s in stores]))
    if selection is not None:
        account = StepAccount(reads=selection["reads"], live=live, mem=selection["mem"])
    else:
        account = StepAccount(reads=live, live=live, mem=live)
    return outs.reshape(-1), account


class SingleLayerEngine:
    """Cached decoding of one attention layer over caller-supplied hidden
    states: k/v come straight from the projections of each h_t."""

    def __init__(
        self,
        proj,
        cfg: AttentionConfig,
        policy: Policy | None = None,
        window: int = 16,
        page_size: int = 16,
    ):
        self.proj = proj
        self.cfg = cfg
        self.policy = policy or VanillaPolicy()
        self.window = window
        self.cache = PagedKVCache(1, cfg.n_kv_heads, cfg.head_dim, page_size)
        self.ledger = ReadLedger()
        self.t = 0

    def decode_step(self, h_t: np.ndarray, phase: str = "decode") -> np.ndarray:
        h_t = np.asarray(h_t, dtype=np.float64)
        q = h_t @ self.proj.w_q.data
        k = h_t @ self.proj.w_k.data
        v = h_t @ self.proj.w_v.data
        ctx, acct = layer_attend_step(
            self.t, h_t, q, k, v, self.cfg, self.policy,
            self.cache.layer_stores(0), self.window,
        )
        self.ledger.record(phase, acct.reads, acct.live, mem_tokens=acct.mem)
        self.t += 1
        return ctx @ self.proj.w_o.data

    def prefill(self, h: np.ndarray) -> np.ndarray:
        """Token-by-token prompt processing with the same eviction semantics;
        entries whose deadline falls inside the prompt are already gone."""
        if self.t != 0:
            raise ValueError("prefill requires an empty cache")
        if len(h) == 0:
            return np.zeros((0, self.cfg.d_model))
        return np.stack([self.decode_step(row, phase="prefill") for row in h])


class ModelEngine:
    """Full-model incremental decoding with one policy instance per layer."""

    def __init__(
        self,
        params,
        cfg: ModelConfig,
        policy_factory=None,
        window: int = 16,
        page_size: int = 16,
        gate_mode: str = EXPLICIT,
    ):
        self.p = {name: t.data for name, t in params.items()}
        self.cfg = cfg
        self.acfg = cfg.attention()
        self.window = window
        self.policies = [
            policy_factory(layer) if policy_factory else VanillaPolicy()
            for layer in range(cfg.n_layers)
        ]
        self.cache = PagedKVCache(
            cfg.n_layers, cfg.n_kv_heads, self.acfg.head_dim, page_size
        )
        self.ledger = ReadLedger()
        self.t = 0
        self._neuron_mask = None
        if gate_mode != EXPLICIT:
            v = np.ones(cfg.d_model)
            for g in range(self.acfg.n_kv_heads):
                v[self.acfg.first_q_head_of(g) * self.acfg.head_dim] = 0.0
            self._neuron_mask = v

    def step(self, token_id: int, phase: str = "decode") -> np.ndarray:
        """Feed one token; returns the next-token logits row."""
        cfg, acfg, p = self.cfg, self.acfg, self.p
        if self.t >= cfg.max_seq:
            raise ValueError("sequence exceeds the model's position table")
        x = p["tok_emb"][token_id] + p["pos_emb"][self.t]
        accounts = []
        for i in range(cfg.n_layers):
            hn = _rmsnorm(x, p[f"l{i}.att_norm.g"])
            q = hn @ p[f"l{i}.wq"]
            q_attend = q * self._neuron_mask if self._neuron_mask is not None else q
            k = hn @ p[f"l{i}.wk"]
            v = hn @ p[f"l{i}.wv"]
            ctx, acct = layer_attend_step(
                self.t, hn, q_attend, k, v, acfg, self.policies[i],
                self.cache.layer_stores(i), self.window, q_gate=q,
            )
            accounts.append(acct)
            x = x + ctx @ p[f"l{i}.wo"]
            mn = _rmsnorm(x, p[f"l{i}.mlp_norm.g"])
            h1 = np.maximum(mn @ p[f"l{i}.w1"] + p[f"l{i}.b1"], 0.0) ** 2
            x = x + h1 @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        self.ledger.record(
            phase,
            float(np.mean([a.reads for a in accounts])),
            float(np.mean([a.live for a in accounts])),
            mem_tokens=float(np.mean([a.mem for a in accounts])),
        )
        self.t += 1
        return _rmsnorm(x, p["out_norm.g"]) @ p["w_out"]

    def prefill(self, ids) -> np.ndarray:
        """Run the prompt; returns the logits row after its last token."""
        logits = None
        for tok in ids:
            logits = self.step(int(tok), phase="prefill")
        return logits

    def generate(
        self,
        prompt_ids,
        max_new: int,
        rng: np.random.Generator,
        temperature: float = 1.0,
        eos_id: int | None = None,
    ) -> list[int]:
        """Sample up to max_new tokens (greedy when temperature == 0)."""
        logits = self.prefill(prompt_ids)
        out: list[int] = []
        for _ in range(max_new):
            if logits is None:
                break
            if temperature == 0.0:
                tok = int(np.argmax(logits))
            else:
                probs = _softmax(logits / temperature)
                tok = int(rng.choice(len(probs), p=probs))
            out.append(tok)
            if eos_id is not None and tok == eos_id:
                break
            if self.t >= self.cfg.max_seq:
                break
            logits = self.step(tok)
        return out
