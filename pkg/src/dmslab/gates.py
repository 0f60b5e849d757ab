"""Eviction gate parameters and the relaxed Bernoulli sampler.

The gate for each (layer, KV head) is a linear probe on the layer input:
logit = h . w + b with w trained from zero and b fixed at -5 so eviction is
effectively off at initialization. Training samples a binary-concrete
relaxation sigmoid((logit + g)/tau) with logistic noise g = log u - log(1-u);
inference rounds sigmoid(logit).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

GATE_BIAS = -5.0
DEFAULT_TAU = 0.1

EXPLICIT = "explicit"
REPURPOSED = "repurposed-neuron"


@dataclass
class GateParams:
    """Per-layer gate: weight matrix (d, n_kv_heads) or a repurposed neuron."""

    mode: str = EXPLICIT
    weights: Tensor | None = None  # None in repurposed-neuron mode
    bias: float = GATE_BIAS
    temperature: float = DEFAULT_TAU

    def __post_init__(self):
        if self.mode not in (EXPLICIT, REPURPOSED):
            raise ValueError(f"unknown gate mode: {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("gate temperature must be positive")
        if self.mode == EXPLICIT and self.weights is None:
            raise ValueError("explicit gate mode requires a weight tensor")

    @classmethod
    def fresh(cls, d_model: int, n_kv_heads: int, mode: str = EXPLICIT,
              temperature: float = DEFAULT_TAU) -> "GateParams":
        w = Tensor(np.zeros((d_model, n_kv_heads)), requires_grad=True) if mode == EXPLICIT else None
        return cls(mode=mode, weights=w, temperature=temperature)


def logistic_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """g = log u - log(1 - u), u ~ Uniform(0, 1) open interval."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return np.log(u) - np.log1p(-u)


def sample_gate(
    logit: Tensor,
    tau: float,
    noise: np.ndarray | None = None,
    deterministic: bool = False,
) -> Tensor:
    """Relaxed eviction decision in [0, 1], differentiable w.r.t. the logit.

    Stochastic mode needs pre-drawn logistic noise of the logit's shape so
    callers can freeze it (finite-difference checks, replayable training).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if deterministic:
        return nm.sigmoid(logit)
    if noise is None:
        raise ValueError("stochastic sampling requires a noise array (freeze it for replay)")
    if noise.shape != logit.shape:
        raise ValueError(f"noise shape {noise.shape} != logit shape {logit.shape}")
    shifted = nm.add(logit, Tensor(noise))
    return nm.sigmoid(nm.scale(shifted, 1.0 / tau))
