"""Paged per-head KV store with pending-eviction deadlines and read accounting.

Pages are allocated per (layer, KV head). An entry marked for eviction at
append time carries deadline = t + window and is removed before any query at
step >= deadline attends. Evicted slots are reused by later appends before
any new page is allocated; live entries are never moved, so positions travel
with their slots.

All ledger quantities are in token units: one unit is one KV entry in one
head, and cross-head aggregates are means over (layer, head) so a vanilla
run reads exactly "sequence length so far" per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NO_DEADLINE = np.iinfo(np.int64).max


class HeadStore:
    """Pages of (key, value, position, deadline) slots for one head."""

    def __init__(self, head_dim: int, page_size: int):
        self.head_dim = head_dim
        self.page_size = page_size
        self.keys: list[np.ndarray] = []  # per page (page_size, head_dim)
        self.values: list[np.ndarray] = []
        self.positions: list[np.ndarray] = []  # -1 marks a free slot
        self.deadlines: list[np.ndarray] = []
        self.page_min: list[np.ndarray] = []  # elementwise key bounds, kept on append
        self.page_max: list[np.ndarray] = []
        self.appended = 0
        self.evicted = 0

    @property
    def live(self) -> int:
        return self.appended - self.evicted

    def _new_page(self) -> int:
        self.keys.append(np.zeros((self.page_size, self.head_dim)))
        self.values.append(np.zeros((self.page_size, self.head_dim)))
        self.positions.append(np.full(self.page_size, -1, dtype=np.int64))
        self.deadlines.append(np.full(self.page_size, NO_DEADLINE, dtype=np.int64))
        self.page_min.append(np.full(self.head_dim, np.inf))
        self.page_max.append(np.full(self.head_dim, -np.inf))
        return len(self.keys) - 1

    def append(self, k: np.ndarray, v: np.ndarray, position: int, deadline: int | None) -> None:
        for p in range(len(self.keys)):
            free = np.nonzero(self.positions[p] < 0)[0]
            if free.size:
                slot = int(free[0])
                break
        else:
            p = self._new_page()
            slot = 0
        self.keys[p][slot] = k
        self.values[p][slot] = v
        self.positions[p][slot] = position
        self.deadlines[p][slot] = NO_DEADLINE if deadline is None else deadline
        self.page_min[p] = np.minimum(self.page_min[p], k)
        self.page_max[p] = np.maximum(self.page_max[p], k)
        self.appended += 1

    def remove_due(self, step: int) -> int:
        """Drop every entry whose deadline is at or before `step`."""
        removed = 0
        for p in range(len(self.keys)):
            due = np.nonzero((self.positions[p] >= 0) & (self.deadlines[p] <= step))[0]
            for slot in due:
                self.positions[p][slot] = -1
                self.deadlines[p][slot] = NO_DEADLINE
                removed += 1
        self.evicted += removed
        return removed

    def evict_position(self, position: int) -> bool:
        for p in range(len(self.keys)):
            hit = np.nonzero(self.positions[p] == position)[0]
            if hit.size:
                self.positions[p][hit[0]] = -1
                self.deadlines[p][hit[0]] = NO_DEADLINE
                self.evicted += 1
                return True
        return False

    def gather(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Live (keys, values, positions), sorted by position."""
        ks, vs, ps = [], [], []
        for p in range(len(self.keys)):
            occ = np.nonzero(self.positions[p] >= 0)[0]
            if occ.size:
                ks.append(self.keys[p][occ])
                vs.append(self.values[p][occ])
                ps.append(self.positions[p][occ])
        if not ks:
            empty = np.zeros((0, self.head_dim))
            return empty, empty.copy(), np.zeros(0, dtype=np.int64)
        k = np.concatenate(ks)
        v = np.concatenate(vs)
        pos = np.concatenate(ps)
        order = np.argsort(pos, kind="stable")
        return k[order], v[order], pos[order]

    def live_positions(self) -> np.ndarray:
        return self.gather()[2]

    def entry_at(self, position: int) -> tuple[int, int] | None:
        for p in range(len(self.keys)):
            hit = np.nonzero(self.positions[p] == position)[0]
            if hit.size:
                return p, int(hit[0])
        return None

    def newest_entry(self) -> tuple[int, int]:
        best, where = -1, None
        for p in range(len(self.keys)):
            occ = np.nonzero(self.positions[p] >= 0)[0]
            if occ.size:
                slot = occ[np.argmax(self.positions[p][occ])]
                if self.positions[p][slot] > best:
                    best, where = int(self.positions[p][slot]), (p, int(slot))
        if where is None:
            raise ValueError("head store is empty")
        return where

    def pages_with_live(self) -> list[int]:
        return [p for p in range(len(self.keys)) if np.any(self.positions[p] >= 0)]

    def physical_pages(self) -> int:
        return len(self.keys)


class PagedKVCache:
    """One HeadStore per (layer, KV head)."""

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int, page_size: int = 16):
        if page_size < 1:
            raise ValueError("page_size must be >= 1")
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.page_size = page_size
        self.stores = [
            [HeadStore(head_dim, page_size) for _ in range(n_kv_heads)] for _ in range(n_layers)
        ]

    def store(self, layer: int, head: int) -> HeadStore:
        return self.stores[layer][head]

    def layer_stores(self, layer: int) -> list[HeadStore]:
        return self.stores[layer]

    def live_counts(self) -> np.ndarray:
        return np.array([[s.live for s in layer] for layer in self.stores], dtype=float)

    def mean_live(self) -> float:
        return float(self.live_counts().mean())

    def remove_due(self, step: int) -> None:
        for layer in self.stores:
            for s in layer:
                s.remove_due(step)


def measured_cr(cache: PagedKVCache, elapsed_tokens: int) -> dict:
    """Compression after `elapsed_tokens` appends: T / live, per head and mean."""
    if elapsed_tokens < 1:
        raise ValueError("elapsed token count must be >= 1")
    lives = cache.live_counts()
    if np.any(lives == 0):
        raise ValueError("measured_cr undefined: a head has no live entries")
    per_head = elapsed_tokens / lives
    return {
        "aggregate": elapsed_tokens / float(lives.mean()),
        "per_head": per_head.tolist(),
    }


def page_accounting(cache: PagedKVCache) -> dict:
    """Idealized page usage per head under slot reuse: ceil(live / page_size).

    `physical_pages` reports pages actually allocated (never compacted by
    moving entries, so it can exceed the ideal count after evictions).
    """
    per_head = []
    for layer in cache.stores:
        row = []
        for s in layer:
            pages = -(-s.live // cache.page_size)  # ceil
            row.append({"pages": pages, "slack": pages * cache.page_size - s.live,
                        "physical_pages": s.physical_pages()})
        per_head.append(row)
    return {"per_head": per_head}


@dataclass
class ReadLedger:
    """Per-step KV read counts plus the running memory peak (token units).

    A step's `reads` is what attention actually touched; `live` is the
    post-step resident count. They differ only for retrieval-style policies
    that read a subset (or, with page metadata, a superset) of the cache.
    """

    prefill_reads: float = 0.0
    decode_reads: float = 0.0
    decode_steps: int = 0
    peak_tokens: float = 0.0
    step_live: list[float] = field(default_factory=list)
    step_reads: list[float] = field(default_factory=list)

    def record(self, phase: str, reads: float, live: float, mem_tokens: float | None = None) -> None:
        if phase not in ("prefill", "decode"):
            raise ValueError(f"unknown phase {phase!r}")
        if phase == "prefill":
            self.prefill_reads += reads
        else:
            self.decode_reads += reads
            self.decode_steps += 1
            self.step_reads.append(reads)
            self.step_live.append(live)
        self.peak_tokens = max(self.peak_tokens, live if mem_tokens is None else mem_tokens)

    @property
    def reads_total(self) -> float:
        return self.decode_reads

    def merge(self, other: "ReadLedger") -> None:
        """Combine ledgers of concurrently resident sequences (order-free)."""
        self.prefill_reads += other.prefill_reads
        self.decode_reads += other.decode_reads
        self.decode_steps += other.decode_steps
        self.peak_tokens += other.peak_tokens  # chains are resident together
        self.step_live += other.step_live
        self.step_reads += other.step_reads

    def export(self, cache: PagedKVCache | None = None, elapsed_tokens: int | None = None) -> dict:
        rec = {
            "steps": self.decode_steps,
            "reads_total": self.reads_total,
            "prefill_reads": self.prefill_reads,
            "peak_tokens": self.peak_tokens,
            "per_head_live": [],
            "measured_cr": None,
        }
        if cache is not None:
            rec["per_head_live"] = cache.live_counts().tolist()
            if elapsed_tokens:
                rec["measured_cr"] = measured_cr(cache, elapsed_tokens)["aggregate"]
        return rec
