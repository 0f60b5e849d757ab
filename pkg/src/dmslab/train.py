"""Retrofitting loop: distill the gated student against the frozen teacher
while the compression target ramps, plus the plain LM pretraining used to
build teachers. Logs are line-delimited JSON with deterministic field order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import corpus, numerics as nm
from .gates import EXPLICIT, REPURPOSED, logistic_noise
from .losses import aux_loss, distill_loss, lm_loss
from .model import (
    ForwardOut,
    GateRun,
    ModelConfig,
    add_gate_params,
    copy_params,
    forward,
    init_params,
)
from .numerics import Tape, Tensor, backward
from .schedule import ScheduleState, TrainSchedule, schedule_state
from .util import rng_for


class NumericalError(RuntimeError):
    """Raised when a loss goes non-finite; carries the last-good reference."""

    def __init__(self, message: str, last_good_step: int):
        super().__init__(message)
        self.last_good_step = last_good_step


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 3e-3,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8,
                 clip_norm: float = 1.0, warmup: int = 0):
        self.params = params
        self.lr, self.betas, self.eps, self.clip_norm = lr, betas, eps, clip_norm
        self.warmup = warmup
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items() if v.requires_grad}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items() if v.requires_grad}

    def step(self) -> None:
        self.t += 1
        lr = self.lr * min(1.0, self.t / self.warmup) if self.warmup else self.lr
        b1, b2 = self.betas
        names = sorted(self.m)
        if self.clip_norm:
            sq = sum(
                float((self.params[n].grad ** 2).sum())
                for n in names
                if self.params[n].grad is not None
            )
            norm = np.sqrt(sq)
            scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        else:
            scale = 1.0
        for n in names:
            p = self.params[n]
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            mhat = self.m[n] / (1 - b1**self.t)
            vhat = self.v[n] / (1 - b2**self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# pretraining (builds the teacher)
# ---------------------------------------------------------------------------


def pretrain(
    cfg: ModelConfig,
    steps: int,
    seed: int,
    batch_size: int = 4,
    seq_len: int = 256,
    lr: float = 3e-3,
    log: list | None = None,
) -> dict[str, Tensor]:
    params = init_params(cfg, rng_for(seed, "pretrain/init"))
    opt = Adam(params, lr=lr)
    max_off = cfg.max_seq - seq_len
    for step in range(steps):
        rows = corpus.sample_batch(
            rng_for(seed, f"pretrain/batch/{step}"), batch_size, seq_len, max_off
        )
        tape = Tape()
        with tape.active():
            loss = None
            for ids, off in rows:
                out = forward(params, cfg, ids[:-1], pos_offset=off)
                item = lm_loss(out.logits, ids[1:])
                loss = item if loss is None else nm.add(loss, item)
            loss = nm.scale(loss, 1.0 / batch_size)
        if not np.isfinite(loss.item()):
            raise NumericalError(f"non-finite pretraining loss at step {step}", step - 1)
        opt.zero_grads()
        backward(tape, loss)
        opt.step()
        if log is not None:
            log.append({"step": step, "lm_loss": loss.item()})
    return params


# ---------------------------------------------------------------------------
# retrofit
# ---------------------------------------------------------------------------


@dataclass
class RetrofitConfig:
    steps: int = 300
    batch_size: int = 4
    seq_len: int = 256
    cr_final: float = 4.0
    steps_per_cr: int = 100
    window: int = 16
    variant: str = "delayed"
    gate_mode: str = EXPLICIT
    tau: float = 0.1
    lr: float = 3e-3
    seed: int = 0
    prephase_steps: int = 0  # repurposed-neuron zero-out phase


def realized_cr_from_alphas(
    alphas: list[np.ndarray], window: int, variant: str = "delayed"
) -> float:
    """Binary-rounded compression on one sequence: T over mean live-at-end.

    Delayed: key j is gone by the final query iff its own rounded decision is
    1 and its deadline j + window <= T - 1. Immediate: the decision at step t
    (t >= window) evicts key t - window.
    """
    lives = []
    for a in alphas:
        T = a.shape[0]
        binary = np.rint(a)
        n = max(T - window, 0)
        sl = binary[:n] if variant == "delayed" else binary[window:]
        for h in range(a.shape[1]):
            lives.append(T - sl[:, h].sum() if n else T)
    T = alphas[0].shape[0]
    return T / float(np.mean(lives))


def _gate_noise(rng: np.random.Generator, cfg: ModelConfig, T: int) -> list[np.ndarray]:
    return [logistic_noise(rng, (T, cfg.n_kv_heads)) for _ in range(cfg.n_layers)]


def retrofit(
    student: dict[str, Tensor],
    teacher: dict[str, Tensor],
    cfg: ModelConfig,
    rcfg: RetrofitConfig,
) -> list[dict]:
    """Run (optional pre-phase plus) the gated distillation loop in place.

    Returns one log record per step: step, l_d, l_aux, alpha_mean per
    layer/head, realized_cr, and the schedule state driving the step.
    """
    sched = TrainSchedule(
        cr_final=rcfg.cr_final,
        steps_per_cr=rcfg.steps_per_cr,
        neuron_horizon=max(rcfg.prephase_steps, 1),
    )
    add_gate_params(student, cfg, rcfg.gate_mode)
    opt = Adam(student, lr=rcfg.lr)
    records: list[dict] = []
    max_off = cfg.max_seq - rcfg.seq_len

    if rcfg.gate_mode == REPURPOSED:
        for step in range(rcfg.prephase_steps):
            state = schedule_state(step, sched)
            rows = corpus.sample_batch(
                rng_for(rcfg.seed, f"prephase/batch/{step}"), rcfg.batch_size,
                rcfg.seq_len, max_off,
            )
            tape = Tape()
            with tape.active():
                loss = None
                for ids, off in rows:
                    t_out = forward(teacher, cfg, ids, pos_offset=off)
                    s_out = forward(student, cfg, ids, pos_offset=off,
                                    neuron_prescale=state.neuron_scale)
                    item = distill_loss(s_out.logits, t_out.logits)
                    loss = item if loss is None else nm.add(loss, item)
                loss = nm.scale(loss, 1.0 / rcfg.batch_size)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite pre-phase loss at step {step}", step - 1)
            opt.zero_grads()
            backward(tape, loss)
            opt.step()
            records.append({"phase": "prephase", "step": step, "l_d": loss.item(),
                            "neuron_scale": state.neuron_scale})

    for step in range(rcfg.steps):
        state = schedule_state(step, sched)
        rows = corpus.sample_batch(
            rng_for(rcfg.seed, f"retrofit/batch/{step}"), rcfg.batch_size,
            rcfg.seq_len, max_off,
        )
        tape = Tape()
        alpha_sums = np.zeros((cfg.n_layers, cfg.n_kv_heads))
        crs: list[float] = []
        with tape.active():
            l_d_total = None
            l_aux_total = None
            for b, (ids, off) in enumerate(rows):
                t_out = forward(teacher, cfg, ids, pos_offset=off)
                noise = _gate_noise(
                    rng_for(rcfg.seed, f"retrofit/noise/{step}/{b}"), cfg, len(ids)
                )
                run = GateRun(mode=rcfg.gate_mode, tau=rcfg.tau, window=rcfg.window,
                              variant=rcfg.variant, noise=noise)
                s_out = forward(student, cfg, ids, pos_offset=off, gate=run)
                l_d = distill_loss(s_out.logits, t_out.logits)
                l_aux = aux_loss(s_out.alphas, state.alpha_star, len(ids))
                l_d_total = l_d if l_d_total is None else nm.add(l_d_total, l_d)
                l_aux_total = l_aux if l_aux_total is None else nm.add(l_aux_total, l_aux)
                alpha_data = [a.data for a in s_out.alphas]
                alpha_sums += np.stack([a.sum(axis=0) for a in alpha_data])
                crs.append(realized_cr_from_alphas(alpha_data, rcfg.window, rcfg.variant))
            l_d_total = nm.scale(l_d_total, 1.0 / rcfg.batch_size)
            l_aux_total = nm.scale(l_aux_total, 1.0 / rcfg.batch_size)
            loss = nm.add(l_d_total, l_aux_total)
        if not np.isfinite(loss.item()):
            raise NumericalError(f"non-finite retrofit loss at step {step}", step - 1)
        opt.zero_grads()
        backward(tape, loss)
        opt.step()
        alpha_mean = alpha_sums / (rcfg.batch_size * rcfg.seq_len)
        records.append(
            {
                "step": step,
                "l_d": l_d_total.item(),
                "l_aux": l_aux_total.item(),
                "alpha_mean": [[float(x) for x in row] for row in alpha_mean],
                "realized_cr": float(np.mean(crs)),
                "cr_target": state.cr_target,
                "alpha_star": state.alpha_star,
            }
        )
    return records


def write_log(records: list[dict], path: str, header: dict | None = None) -> None:
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# held-out measurements
# ---------------------------------------------------------------------------


def heldout_rows(cfg: ModelConfig, seed: int, n_rows: int, seq_len: int) -> list[np.ndarray]:
    rng = rng_for(seed, "heldout/rows")
    return [corpus.pack_row(rng, seq_len) for _ in range(n_rows)]


def heldout_realized_cr(
    params: dict[str, Tensor], cfg: ModelConfig, rows: list[np.ndarray],
    window: int, variant: str = "delayed", gate_mode: str = EXPLICIT, tau: float = 0.1,
) -> float:
    """Compression measured with rounded (inference) decisions on held-out text."""
    crs = []
    run = GateRun(mode=gate_mode, tau=tau, window=window, variant=variant,
                  rounded=True, clamp=False)
    for ids in rows:
        out = forward(params, cfg, ids, gate=run)
        crs.append(realized_cr_from_alphas([a.data for a in out.alphas], window, variant))
    return float(np.mean(crs))


def heldout_distill_loss(
    student: dict[str, Tensor], teacher: dict[str, Tensor], cfg: ModelConfig,
    rows: list[np.ndarray], window: int, variant: str = "delayed",
    gate_mode: str = EXPLICIT, tau: float = 0.1,
) -> float:
    """Distillation loss with deterministic (noise-free) relaxed gates."""
    run = GateRun(mode=gate_mode, tau=tau, window=window, variant=variant,
                  deterministic=True)
    vals = []
    for ids in rows:
        t_out = forward(teacher, cfg, ids)
        s_out = forward(student, cfg, ids, gate=run)
        vals.append(distill_loss(s_out.logits, t_out.logits).item())
    return float(np.mean(vals))
