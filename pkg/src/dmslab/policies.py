"""Cache policies behind one interface: the trained delayed-eviction gate,
its immediate-eviction ablation, scripted decision streams, and the
training-free baselines (attention-weight eviction, cumulative heavy-hitter
eviction, query-aware page retrieval, append-or-accumulate merging).

A policy instance is bound to one layer of one sequence. The decode engine
calls, in order: decisions() -> pre_step() -> remove_due -> append() per head
-> select() -> attention -> post_attend().
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kvcache import HeadStore

POLICY_NAMES = ("vanilla", "dms", "dms-immediate", "tova", "h2o", "quest", "dmc-lite")


@dataclass(frozen=True)
class PolicyBudget:
    """KV budget = floor((input_len + max_gen_len) / CR), at least 1."""

    kv_budget: int

    def __post_init__(self):
        if self.kv_budget < 1:
            raise ValueError("kv_budget must be >= 1")

    @classmethod
    def from_cr(cls, input_len: int, max_gen_len: int, cr: float) -> "PolicyBudget":
        return cls(max(1, int((input_len + max_gen_len) / cr)))

    def h2o_split(self) -> tuple[int, int]:
        """(recent, heavy) halves; the heavy-hitter half takes the odd slot."""
        recent = self.kv_budget // 2
        return recent, self.kv_budget - recent


# ---------------------------------------------------------------------------
# spec-level primitives (pure functions, independently testable)
# ---------------------------------------------------------------------------


def tova_evict(attn_weights: np.ndarray, positions: np.ndarray) -> int:
    """Position with the lowest head-summed current-step attention weight.

    attn_weights is (n_heads, n_live) aligned with `positions`; ties break
    toward the lowest position.
    """
    summed = attn_weights.sum(axis=0)
    best = np.lexsort((positions, summed))[0]
    return int(positions[best])


def h2o_evict(
    cumulative: np.ndarray, positions: np.ndarray, protected: int
) -> int | None:
    """Lowest cumulative-attention position outside the newest `protected`.

    Returns None when every live position is inside the recent window.
    """
    if len(positions) <= protected:
        return None
    order = np.argsort(positions)
    candidates = order[: len(positions) - protected] if protected else order
    cand_pos = positions[candidates]
    cand_cum = cumulative[candidates]
    best = np.lexsort((cand_pos, cand_cum))[0]
    return int(cand_pos[best])


def quest_page_score(q: np.ndarray, page_min: np.ndarray, page_max: np.ndarray) -> float:
    """Upper bound on q . k over the page: sum_j max(q_j*min_j, q_j*max_j)."""
    return float(np.maximum(q * page_min, q * page_max).sum())


def quest_select(q: np.ndarray, metas: list[tuple[int, np.ndarray, np.ndarray]],
                 top_k: int) -> list[int]:
    """Top-k page ids by score bound; ties toward lower page id; selects all
    pages when top_k covers them."""
    if not metas:
        raise ValueError("quest_select needs at least one page")
    if top_k >= len(metas):
        return [pid for pid, _, _ in metas]
    scored = sorted(metas, key=lambda m: (-quest_page_score(q, m[1], m[2]), m[0]))
    return [pid for pid, _, _ in scored[:top_k]]


def dmc_lite_step(store: HeadStore, decision: str, k: np.ndarray, v: np.ndarray,
                  position: int, counts: dict[int, int]) -> None:
    """Append as usual, or accumulate into the newest entry with a running
    uniform-weight mean over its constituents. `counts` maps the entry's page
    coordinates to how many tokens it already merged."""
    if decision == "append":
        store.append(k, v, position, None)
        return
    if decision != "accumulate":
        raise ValueError(f"unknown decision {decision!r}")
    if store.live == 0:
        raise ValueError("cannot accumulate into an empty head")
    p, slot = store.newest_entry()
    m = counts.get((p, slot), 1)
    store.keys[p][slot] = (store.keys[p][slot] * m + k) / (m + 1)
    store.values[p][slot] = (store.values[p][slot] * m + v) / (m + 1)
    store.positions[p][slot] = position
    counts[(p, slot)] = m + 1
    store.page_min[p] = np.minimum(store.page_min[p], store.keys[p][slot])
    store.page_max[p] = np.maximum(store.page_max[p], store.keys[p][slot])


# ---------------------------------------------------------------------------
# per-layer policy objects
# ---------------------------------------------------------------------------


class Policy:
    name = "vanilla"
    needs_weights = False

    def decisions(self, t: int, h: np.ndarray, q: np.ndarray) -> np.ndarray | None:
        """Per-KV-head binary eviction decisions for the incoming token."""
        return None

    def pre_step(self, t: int, stores: list[HeadStore]) -> None:
        pass

    def append(self, store: HeadStore, head: int, k: np.ndarray, v: np.ndarray,
               t: int, deadline: int | None) -> None:
        store.append(k, v, t, deadline)

    def select(self, t: int, q_heads: list[np.ndarray], stores: list[HeadStore],
               kv_head_of) -> dict | None:
        """Optional read restriction: {"per_q": positions list, "reads": mean}."""
        return None

    def post_attend(self, t: int, weights: np.ndarray, positions: np.ndarray,
                    stores: list[HeadStore]) -> None:
        pass


class VanillaPolicy(Policy):
    pass


class ScriptedDmsPolicy(Policy):
    """Delayed eviction driven by a precomputed (T, n_kv) binary stream."""

    name = "dms"

    def __init__(self, stream: np.ndarray, window: int, variant: str = "delayed"):
        self.stream = np.asarray(stream)
        if self.stream.ndim == 1:
            self.stream = self.stream[:, None]
        self.window = window
        self.variant = variant
        if variant == "immediate":
            self.name = "dms-immediate"

    def _decision_row(self, t: int) -> np.ndarray:
        return self.stream[t] if t < len(self.stream) else np.zeros(self.stream.shape[1])

    def decisions(self, t, h, q):
        if self.variant != "delayed":
            return None
        return self._decision_row(t)

    def pre_step(self, t, stores):
        if self.variant != "immediate" or t < self.window:
            return
        row = self._decision_row(t)
        for head, s in enumerate(stores):
            if row[head] >= 0.5:
                s.evict_position(t - self.window)


class GateDmsPolicy(Policy):
    """Delayed eviction from the trained gate: round(sigmoid(h.w + b))."""

    name = "dms"

    def __init__(self, gate_w: np.ndarray | None, bias: float, window: int,
                 cfg, variant: str = "delayed"):
        self.gate_w = gate_w  # (d, n_kv); None = repurposed first neuron
        self.bias = bias
        self.window = window
        self.cfg = cfg
        self.variant = variant
        if variant == "immediate":
            self.name = "dms-immediate"
        self._last: np.ndarray | None = None

    def _compute(self, h: np.ndarray, q: np.ndarray) -> np.ndarray:
        if self.gate_w is not None:
            logits = h @ self.gate_w + self.bias
        else:
            firsts = [
                self.cfg.first_q_head_of(g) * self.cfg.head_dim
                for g in range(self.cfg.n_kv_heads)
            ]
            logits = q[firsts] + self.bias
        return np.rint(1.0 / (1.0 + np.exp(-logits)))

    def decisions(self, t, h, q):
        row = self._compute(h, q)
        self._last = row
        return row if self.variant == "delayed" else None

    def pre_step(self, t, stores):
        # immediate variant: the decision just made evicts the token from
        # `window` steps ago (the engine calls decisions() first)
        if self.variant != "immediate" or self._last is None or t < self.window:
            return
        for head, s in enumerate(stores):
            if self._last[head] >= 0.5:
                s.evict_position(t - self.window)


class TovaPolicy(Policy):
    """Keep at most kv_budget entries; evict the lowest current-step weight."""

    name = "tova"
    needs_weights = True

    def __init__(self, budget: PolicyBudget):
        self.budget = budget.kv_budget

    def post_attend(self, t, weights, positions, stores):
        if stores[0].live <= self.budget:
            return
        victim = tova_evict(weights, positions)
        for s in stores:
            s.evict_position(victim)


class H2OPolicy(Policy):
    """Evict the lowest cumulative attention outside the recent half."""

    name = "h2o"
    needs_weights = True

    def __init__(self, budget: PolicyBudget):
        self.budget = budget.kv_budget
        self.recent, self.heavy = budget.h2o_split()
        self.cumulative: dict[int, float] = {}

    def post_attend(self, t, weights, positions, stores):
        summed = weights.sum(axis=0)
        for pos, w in zip(positions, summed):
            self.cumulative[int(pos)] = self.cumulative.get(int(pos), 0.0) + float(w)
        if stores[0].live <= self.budget:
            return
        cum = np.array([self.cumulative[int(p)] for p in positions])
        victim = h2o_evict(cum, positions, self.recent)
        if victim is None:
            return
        for s in stores:
            s.evict_position(victim)
        self.cumulative.pop(victim, None)


class QuestPolicy(Policy):
    """Dense storage; reads only top-k pages per query head. The page holding
    the newest entry is always read so the current token can attend to
    itself. Reads are counted once per distinct page per KV head."""

    name = "quest"

    def __init__(self, budget: PolicyBudget, page_size: int):
        self.top_k = max(1, budget.kv_budget // page_size)

    def select(self, t, q_heads, stores, kv_head_of):
        per_q: list[np.ndarray] = []
        union_pages: list[set[int]] = [set() for _ in stores]
        newest = [s.newest_entry()[0] for s in stores]
        for qi, q in enumerate(q_heads):
            g = kv_head_of(qi)
            s = stores[g]
            metas = [
                (pid, s.page_min[pid], s.page_max[pid]) for pid in s.pages_with_live()
            ]
            chosen = set(quest_select(q, metas, self.top_k))
            chosen.add(newest[g])
            union_pages[g] |= chosen
            keep = []
            for pid in sorted(chosen):
                occ = np.nonzero(s.positions[pid] >= 0)[0]
                keep.extend(int(p) for p in s.positions[pid][occ])
            per_q.append(np.sort(np.array(keep, dtype=np.int64)))
        reads = []
        mem = []
        for g, s in enumerate(stores):
            n_entries = 0
            for pid in union_pages[g]:
                n_entries += int(np.count_nonzero(s.positions[pid] >= 0))
            reads.append(n_entries)
            # metadata overhead: two bound vectors per live page = one entry
            mem.append(s.live + len(s.pages_with_live()))
        return {"per_q": per_q, "reads": float(np.mean(reads)), "mem": float(np.mean(mem))}


class DmcLitePolicy(Policy):
    """Scripted append/accumulate stream shared by all heads of the layer."""

    name = "dmc-lite"

    def __init__(self, stream: list[str] | np.ndarray):
        # numeric streams: 0 = append, 1 = accumulate
        if not isinstance(stream, list):
            stream = ["accumulate" if x >= 0.5 else "append" for x in np.asarray(stream).ravel()]
        self.stream = stream
        self.counts: list[dict] = []

    def append(self, store, head, k, v, t, deadline):
        while head >= len(self.counts):
            self.counts.append({})
        decision = self.stream[t] if t < len(self.stream) else "append"
        if t == 0:
            decision = "append"  # nothing to merge into yet
        dmc_lite_step(store, decision, k, v, t, self.counts[head])
