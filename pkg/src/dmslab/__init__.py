"""dmslab: a desk-scale laboratory for trainable delayed-eviction KV-cache
sparsification, paged-cache eviction policies, an analytical cost model, and
budget-sweep Pareto analysis."""

from .attention import AttentionConfig, ProjectionSet, attend, gate_logits
from .masks import MaskSpec, build_mask
from .model import ModelConfig
from .numerics import Tape, Tensor, backward
from .schedule import TrainSchedule, schedule_state

__all__ = [
    "AttentionConfig",
    "ProjectionSet",
    "attend",
    "gate_logits",
    "MaskSpec",
    "build_mask",
    "ModelConfig",
    "Tape",
    "Tensor",
    "backward",
    "TrainSchedule",
    "schedule_state",
]
