"""Synthetic token streams: verifiable toy tasks plus compressible filler.

Three task families, all solvable by a small induction-capable model and all
scored by exact match:

  mod_chain   countdown arithmetic: prompt [BOS d cnt_K s0], chain emits
              (cnt_{K-1}, s1), (cnt_{K-2}, s2), ... with s_{i+1} = s_i + d
              mod 10, then ANS s_K EOS once the counter hits zero.
  copy        copy-with-distractors: a marked motif followed by filler; after
              QRY the motif must be reproduced, terminated by SEP.
  needle      a single (key, value) pair buried in filler; after QRY key the
              value must be produced.

Training rows pack task texts with repeated-motif spans and i.i.d. filler so
most tokens are genuinely evictable. All generators are pure functions of the
rng passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB = 256

PLUS, EQ, SEP, BOS, EOS, ANS, QRY, KEY = 10, 11, 12, 13, 14, 15, 16, 17
# small, high-frequency alphabets: every token recurs across rows often, which
# is what lets a 2-layer model pick up in-context copying quickly
FILLER_LO, FILLER_HI = 32, 80  # 48 filler tokens
VAR_LO, VAR_HI = 160, 192  # 32 variable tokens
CNT_LO, CNT_HI = 224, 256  # 32 countdown tokens; CNT_LO + i means "i steps left"

TASKS = ("mod_chain", "copy", "needle")


@dataclass
class TaskInstance:
    task: str
    prompt: list[int]
    answer: object  # int or tuple of ints
    text: list[int]  # prompt + ideal completion, used for LM training


def _filler(rng: np.random.Generator, n: int) -> list[int]:
    return rng.integers(FILLER_LO, FILLER_HI, size=n).tolist()


def gen_mod_chain(rng: np.random.Generator, k_min: int = 4, k_max: int = 16) -> TaskInstance:
    """Chain format: BOS d cnt_k s0 | cnt_{k-1} d s1 | ... | cnt_0 d s_k | ANS s_k EOS.

    Each step restates the countdown and the delta, so every update depends
    only on tokens at most three positions back."""
    k = int(rng.integers(k_min, k_max + 1))
    d = int(rng.integers(1, 10))
    s = int(rng.integers(0, 10))
    prompt = [BOS, d, CNT_LO + k, s]
    body: list[int] = []
    cur = s
    for i in range(k, 0, -1):
        cur = (cur + d) % 10
        body += [CNT_LO + i - 1, d, cur]
    text = prompt + body + [ANS, cur, EOS]
    return TaskInstance("mod_chain", prompt, cur, text)


def gen_copy(
    rng: np.random.Generator, motif_len: int = 8, prompt_len: int = 96
) -> TaskInstance:
    motif = rng.choice(np.arange(VAR_LO, VAR_HI), size=motif_len, replace=False).tolist()
    pad = prompt_len - (motif_len + 4)  # BOS KEY ... SEP ... QRY
    lead = int(rng.integers(0, pad + 1))
    prompt = (
        [BOS]
        + _filler(rng, lead)
        + [KEY]
        + motif
        + [SEP]
        + _filler(rng, pad - lead)
        + [QRY]
    )
    text = prompt + motif + [SEP, EOS]
    return TaskInstance("copy", prompt, tuple(motif), text)


def gen_needle(rng: np.random.Generator, prompt_len: int = 64) -> TaskInstance:
    key = int(rng.integers(VAR_LO, VAR_HI))
    val = int(rng.integers(0, 10))
    pad = prompt_len - 6
    lead = int(rng.integers(0, pad + 1))
    prompt = (
        [BOS]
        + _filler(rng, lead)
        + [KEY, key, val]
        + _filler(rng, pad - lead)
        + [QRY, key]
    )
    text = prompt + [val, EOS]
    return TaskInstance("needle", prompt, val, text)


def gen_task(rng: np.random.Generator, task: str) -> TaskInstance:
    if task == "mod_chain":
        return gen_mod_chain(rng)
    if task == "copy":
        return gen_copy(rng)
    if task == "needle":
        return gen_needle(rng)
    raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")


def extract_answer(task: str, generated: list[int]):
    """Parse a generated continuation into an answer (None if malformed)."""
    if task == "mod_chain":
        for pos, tok in enumerate(generated):
            if tok == ANS and pos + 1 < len(generated):
                return int(generated[pos + 1])
        return None
    if task == "copy":
        if SEP not in generated:
            return None
        return tuple(generated[: generated.index(SEP)])
    if task == "needle":
        return int(generated[0]) if generated else None
    raise ValueError(f"unknown task {task!r}")


def _motif_span(rng: np.random.Generator, n: int) -> list[int]:
    m = rng.integers(FILLER_LO, FILLER_HI, size=int(rng.integers(4, 13))).tolist()
    out: list[int] = [SEP]
    while len(out) < n:
        out += m
    return out[:n]


def pack_row(rng: np.random.Generator, length: int) -> np.ndarray:
    """One LM training row: tasks, motif repeats, and i.i.d. filler."""
    out: list[int] = []
    while len(out) < length:
        r = rng.random()
        if r < 0.45:
            out += gen_task(rng, TASKS[int(rng.integers(0, len(TASKS)))]).text
        elif r < 0.80:
            out += _motif_span(rng, int(rng.integers(24, 64)))
        else:
            out += _filler(rng, int(rng.integers(12, 33)))
    return np.asarray(out[:length], dtype=np.int64)


def sample_batch(
    rng: np.random.Generator, batch: int, length: int, max_offset: int = 0
) -> list[tuple[np.ndarray, int]]:
    """Rows plus position offsets (offsets spread position-embedding training)."""
    rows = []
    for _ in range(batch):
        off = int(rng.integers(0, max_offset + 1)) if max_offset > 0 else 0
        rows.append((pack_row(rng, length), off))
    return rows
