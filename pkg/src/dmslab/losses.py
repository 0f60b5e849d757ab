"""Retrofit objective: logit distillation plus the one-sided compression hinge."""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor

# Student log-probs are floored here so a fully divergent position yields a
# large finite loss instead of +inf.
LOGPROB_FLOOR = -30.0


def aux_loss(alphas: list[Tensor], target_alpha: float, seq_len: int) -> Tensor:
    """Hinge max(a* . L . H . T - sum(a), 0) over all layers, heads, tokens.

    Each tensor in `alphas` is one layer's (T, n_kv_heads) decisions. While
    the hinge is open, every decision receives gradient -1 exactly.
    """
    if not 0.0 <= target_alpha < 1.0:
        raise ValueError("target compression fraction must lie in [0, 1)")
    total_slots = sum(a.size for a in alphas)
    if any(a.shape[0] != seq_len for a in alphas):
        raise ValueError("alpha tensors must cover the full sequence")
    total = nm.sum_all(alphas[0])
    for a in alphas[1:]:
        total = nm.add(total, nm.sum_all(a))
    return nm.relu(nm.add_const(nm.scale(total, -1.0), target_alpha * total_slots))


def distill_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean over positions of KL(teacher || student) on softmax distributions.

    The teacher side is treated as constant. Student log-probs are clamped at
    LOGPROB_FLOOR, which keeps the value finite when the student has zeroed
    out a token the teacher still predicts.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes differ: student {student_logits.shape} vs "
            f"teacher {teacher_logits.shape}"
        )
    t = teacher_logits.data
    t_shift = t - t.max(axis=-1, keepdims=True)
    t_logp = t_shift - np.log(np.exp(t_shift).sum(axis=-1, keepdims=True))
    t_p = np.exp(t_logp)
    s_logp = nm.clip_min(nm.log_softmax_rows(student_logits), LOGPROB_FLOOR)
    per_slot = nm.mul(Tensor(t_p), nm.sub(Tensor(t_logp), s_logp))
    n_rows = student_logits.shape[0]
    return nm.scale(nm.sum_all(per_slot), 1.0 / n_rows)


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy; targets align with logit rows."""
    logp = nm.log_softmax_rows(logits)
    picked = nm.take_per_row(logp, targets)
    return nm.scale(nm.sum_all(picked), -1.0 / len(targets))
