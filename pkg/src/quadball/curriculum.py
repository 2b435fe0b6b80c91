"""Training curriculum: difficulty ramps keyed to the PPO iteration count.

Three quantities grow harder over training: the randomization factor (0 to 1),
the commanded rotation speed (0 to 15 deg/s by default), and the target-update
rate (periods 1.0 s, then 0.5 s, then 0.33 s). Factor and speed ramp linearly
between iteration milestones; the period steps down through the discrete set.
A schedule where initial == final gives a constant, which is how fixed-stage
configs (for example the balancing stage used in acceptance) are expressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rotation import ALLOWED_PERIODS, AngularVelocityCommand

AXIS_VECTORS = {
    "roll": (1.0, 0.0, 0.0),
    "pitch": (0.0, 1.0, 0.0),
    "yaw": (0.0, 0.0, 1.0),
}
DEFAULT_AXES = ("roll", "pitch", "yaw")


@dataclass(frozen=True)
class CurriculumSchedule:
    factor_initial: float = 0.0
    factor_final: float = 1.0
    factor_start_iter: int = 0
    factor_end_iter: int = 8000
    speed_initial_deg: float = 0.0
    speed_final_deg: float = 15.0
    speed_start_iter: int = 2000
    speed_end_iter: int = 10000
    # (iteration, period_s) pairs; the last pair at or before the current
    # iteration is in effect
    period_milestones: tuple = ((0, 1.0), (4000, 0.5), (8000, 0.33))

    def validate(self) -> None:
        if not 0.0 <= self.factor_initial <= self.factor_final <= 1.0:
            raise ValueError("factor ramp must be non-decreasing within [0, 1]")
        if not 0.0 <= self.speed_initial_deg <= self.speed_final_deg:
            raise ValueError("speed ramp must be non-decreasing and non-negative")
        for start, end in ((self.factor_start_iter, self.factor_end_iter),
                           (self.speed_start_iter, self.speed_end_iter)):
            if start < 0 or end < start:
                raise ValueError("ramp milestones must satisfy 0 <= start <= end")
        if len(self.period_milestones) == 0:
            raise ValueError("period_milestones must be non-empty")
        prev_iter = None
        prev_period = None
        for it, period in self.period_milestones:
            if it < 0 or (prev_iter is not None and it <= prev_iter):
                raise ValueError("period milestone iterations must be strictly increasing")
            if not any(math.isclose(period, p) for p in ALLOWED_PERIODS):
                raise ValueError(f"period {period} not in the supported set {ALLOWED_PERIODS}")
            if prev_period is not None and period > prev_period:
                raise ValueError("periods must be non-increasing over milestones")
            prev_iter, prev_period = it, period
        if self.period_milestones[0][0] != 0:
            raise ValueError("first period milestone must be at iteration 0")


@dataclass(frozen=True)
class CurriculumState:
    iteration: int
    factor: float
    target_speed: float      # rad/s
    update_period: float     # s

    @property
    def target_speed_deg(self) -> float:
        return math.degrees(self.target_speed)


def _ramp(iteration: int, start: int, end: int, v0: float, v1: float) -> float:
    if iteration <= start:
        return v0
    if iteration >= end:
        return v1
    return v0 + (v1 - v0) * (iteration - start) / (end - start)


def state_at(schedule: CurriculumSchedule, iteration: int) -> CurriculumState:
    """Curriculum values in effect at a given PPO iteration."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    factor = _ramp(iteration, schedule.factor_start_iter, schedule.factor_end_iter,
                   schedule.factor_initial, schedule.factor_final)
    speed_deg = _ramp(iteration, schedule.speed_start_iter, schedule.speed_end_iter,
                      schedule.speed_initial_deg, schedule.speed_final_deg)
    period = schedule.period_milestones[0][1]
    for it, p in schedule.period_milestones:
        if iteration >= it:
            period = p
    return CurriculumState(
        iteration=iteration,
        factor=factor,
        target_speed=math.radians(speed_deg),
        update_period=period,
    )


def advance(state: CurriculumState, schedule: CurriculumSchedule) -> CurriculumState:
    """State for the next iteration; idempotent once every ramp saturates."""
    return state_at(schedule, state.iteration + 1)


def sample_command(state: CurriculumState, rng, axes=DEFAULT_AXES) -> AngularVelocityCommand:
    """Draw one episode's rotation command: uniform axis and sign from the
    configured set, magnitude and period from the curriculum state."""
    if len(axes) == 0:
        raise ValueError("axis set must be non-empty")
    for name in axes:
        if name not in AXIS_VECTORS:
            raise ValueError(f"unknown axis {name!r}; expected one of {sorted(AXIS_VECTORS)}")
    idx = int(rng.integers(0, len(axes)))
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    axis = sign * np.array(AXIS_VECTORS[axes[idx]])
    return AngularVelocityCommand(
        axis=axis,
        magnitude=state.target_speed,
        update_period=state.update_period,
    )
