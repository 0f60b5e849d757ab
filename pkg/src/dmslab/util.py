"""Seed plumbing: one root seed per run, split per component by fixed labels."""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Deterministic child generator for (seed, label).

    Labels are stable strings like "corpus/batch", so reruns with the same
    seed replay identical streams and different components never share one.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))
