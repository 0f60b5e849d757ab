"""Compression-ratio ramp: one CR unit per `steps_per_cr` training steps."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrainSchedule:
    cr_final: float
    steps_per_cr: int = 100
    neuron_horizon: int = 2000  # pre-phase length for repurposed-neuron mode

    def __post_init__(self):
        if self.cr_final < 1.0:
            raise ValueError("final compression ratio must be >= 1")
        if self.steps_per_cr < 1 or self.neuron_horizon < 1:
            raise ValueError("schedule step counts must be positive")


@dataclass(frozen=True)
class ScheduleState:
    cr_target: float
    alpha_star: float
    neuron_scale: float


def schedule_state(t: int, sched: TrainSchedule) -> ScheduleState:
    """CR(t) = min(t / steps_per_cr + 1, CR_final), annealed linearly in t.

    alpha_star(t) = 1 - 1/CR(t); neuron_scale = max(1 - t/horizon, 0) is the
    pre-phase multiplier on each group's first query neuron.
    """
    if t < 0:
        raise ValueError("step must be >= 0")
    cr = min(t / sched.steps_per_cr + 1.0, sched.cr_final)
    return ScheduleState(
        cr_target=cr,
        alpha_star=1.0 - 1.0 / cr,
        neuron_scale=max(1.0 - t / sched.neuron_horizon, 0.0),
    )
