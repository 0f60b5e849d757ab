"""Analytical decode-step cost model: FLOPs, HBM reads, latency roofline.

Per decode step with batch B and context length L:

    flops(B, L) = n*B*(6*d*d_ff + 4*d^2 + 4*d*d_kv + 4*d*L) + 2*B*d*V
    reads(B, L) = s * [n*(6*d*d_ff + 4*d^2 + 4*d*d_kv + 4*B*L*d_kv) + 2*d*V]

with s = bytes_per_param / 2 (the byte coefficients assume 16-bit weights and
cache). Only the KV term scales with B and L; reads(1, 0) / 2 approximates
the parameter count. Latency assumes ideal overlap: the max of compute time
and memory time. kv_read_fraction is the KV share of bytes read, which is the
KV share of latency whenever the step is memory-bound.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .kvcache import ReadLedger

H100_PEAK_FLOPS = 989.5e12
H100_HBM_BANDWIDTH = 3.35e12


@dataclass(frozen=True)
class ModelProfile:
    n: int  # layers
    d: int  # hidden dim
    d_ff: int  # MLP inner dim
    d_kv: int  # per-token KV width (n_kv_heads * head_dim)
    vocab: int
    peak_flops: float = H100_PEAK_FLOPS
    hbm_bandwidth: float = H100_HBM_BANDWIDTH
    bytes_per_param: float = 2.0

    def __post_init__(self):
        if min(self.n, self.d, self.d_ff, self.d_kv, self.vocab) <= 0:
            raise ValueError("profile dimensions must be positive")
        if self.peak_flops <= 0 or self.hbm_bandwidth <= 0 or self.bytes_per_param <= 0:
            raise ValueError("hardware fields must be positive")


PRESETS: dict[str, ModelProfile] = {
    "llama-3.1-8b": ModelProfile(n=32, d=4096, d_ff=14336, d_kv=1024, vocab=128256),
    "qwen-r1-7b": ModelProfile(n=28, d=3584, d_ff=18944, d_kv=512, vocab=152064),
    "qwen-r1-1.5b": ModelProfile(n=28, d=1536, d_ff=8960, d_kv=256, vocab=151936),
}


def load_profile(path: str) -> ModelProfile:
    """Profile file fields: n, d, d_ff, d_kv, V, peak_flops, hbm_bandwidth,
    bytes_per_param (hardware fields optional, defaulting to the H100 SXM)."""
    with open(path) as f:
        raw = json.load(f)
    return ModelProfile(
        n=raw["n"],
        d=raw["d"],
        d_ff=raw["d_ff"],
        d_kv=raw["d_kv"],
        vocab=raw["V"],
        peak_flops=raw.get("peak_flops", H100_PEAK_FLOPS),
        hbm_bandwidth=raw.get("hbm_bandwidth", H100_HBM_BANDWIDTH),
        bytes_per_param=raw.get("bytes_per_param", 2.0),
    )


def get_profile(name: str) -> ModelProfile:
    if name not in PRESETS:
        raise KeyError(f"unknown profile {name!r}; presets: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]


def _check_bl(B: int, L: int) -> None:
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if L < 0:
        raise ValueError("context length must be >= 0")


def flops(p: ModelProfile, B: int, L: int) -> float:
    _check_bl(B, L)
    return p.n * B * (6 * p.d * p.d_ff + 4 * p.d**2 + 4 * p.d * p.d_kv + 4 * p.d * L) + (
        2 * B * p.d * p.vocab
    )


def reads(p: ModelProfile, B: int, L: int) -> float:
    _check_bl(B, L)
    scale = p.bytes_per_param / 2.0
    return scale * (
        p.n * (6 * p.d * p.d_ff + 4 * p.d**2 + 4 * p.d * p.d_kv + 4 * B * L * p.d_kv)
        + 2 * p.d * p.vocab
    )


def kv_read_bytes(p: ModelProfile, B: int, L: int) -> float:
    _check_bl(B, L)
    return (p.bytes_per_param / 2.0) * 4 * p.n * B * L * p.d_kv


@dataclass(frozen=True)
class CostReport:
    flops: float
    bytes_read: float
    latency_seconds: float
    kv_read_fraction: float
    memory_bound: bool


def latency(p: ModelProfile, B: int, L: int) -> CostReport:
    f = flops(p, B, L)
    r = reads(p, B, L)
    compute_t = f / p.peak_flops
    memory_t = r / p.hbm_bandwidth
    return CostReport(
        flops=f,
        bytes_read=r,
        latency_seconds=max(compute_t, memory_t),
        kv_read_fraction=kv_read_bytes(p, B, L) / r,
        memory_bound=memory_t >= compute_t,
    )


def dense_decode_reads(prompt_len: int, n_generated: int) -> float:
    """Closed form for an uncompressed run: sum_{t=0}^{n-1} (p + t + 1)."""
    return n_generated * prompt_len + n_generated * (n_generated + 1) / 2.0


def effective_axes(ledger: ReadLedger | dict) -> tuple[float, float]:
    """(kv_token_reads, peak_tokens) straight from a ledger or its export.

    Policy-specific adjustments (page-granular reads and metadata overhead
    for retrieval policies) are already folded in by the engine, so this is
    a copy, not a re-derivation.
    """
    if isinstance(ledger, dict):
        return float(ledger["reads_total"]), float(ledger["peak_tokens"])
    return float(ledger.reads_total), float(ledger.peak_tokens)
