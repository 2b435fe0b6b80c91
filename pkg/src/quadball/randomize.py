"""Domain randomization and external disturbances.

Three concerns live here: per-episode model randomization (leg geometry, ball
properties, contact parameters, initial pose), per-step observation noise, and
the scheduled external pushes on the ball. Everything is scaled by the
curriculum factor in [0, 1]: Gaussian stds scale linearly, uniform ranges
shrink linearly toward their midpoints, so factor 0 means an exactly nominal
model and factor 1 the full configured ranges.

All sampling goes through numpy Generators handed in by the caller, which owns
the seed-stream discipline (see `rollout`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rotation import quat_compose, quat_exp

# Observation frame layout (43 scalars). Defined here because this module
# decides which entries are measurements (noised) and which are internal
# bookkeeping (never noised); `env` builds frames in this order.
F_JOINT_POS = slice(0, 12)
F_JOINT_VEL = slice(12, 24)
F_BALL_POS = slice(24, 27)
F_QUAT_DIFF = slice(27, 31)
F_PREV_ACTION = slice(31, 43)
FRAME_DIM = 43


@dataclass(frozen=True)
class RandomizationConfig:
    """Ranges for per-episode model draws and per-step measurement noise.

    Model side: the shank mount point and shank length of each leg, ball mass
    and radius (relative), friction and restitution (uniform ranges), and the
    initial pose. Measurement side: joint state, ball position, and ball
    orientation noise.
    """

    shank_noise_std: float = 0.03          # m, mount offset and length
    joint_pos_noise_std: float = 0.05      # rad
    joint_vel_noise_std: float = 0.3       # rad/s
    ball_pos_noise_std: float = 0.04       # m
    ball_ori_noise_std: float = 0.03       # rad per axis
    ball_mass_rel: float = 0.05
    ball_radius_rel: float = 0.10
    friction_range: tuple = (0.5, 1.1)
    restitution_range: tuple = (0.9, 1.0)
    init_joint_pos_std: float = 0.1        # rad, reset pose perturbation
    init_ball_offset_std: float = 0.02     # m, horizontal ball placement

    def validate(self) -> None:
        for name in (
            "shank_noise_std", "joint_pos_noise_std", "joint_vel_noise_std",
            "ball_pos_noise_std", "ball_ori_noise_std", "ball_mass_rel",
            "ball_radius_rel", "init_joint_pos_std", "init_ball_offset_std",
        ):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a non-negative finite number")
        for name in ("friction_range", "restitution_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo <= hi):
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class RandomizationSample:
    """One episode's model draw, in the units build_model expects."""

    shank_pos_delta: np.ndarray    # (4, 3) m, added to the shank mount point
    shank_len_delta: np.ndarray    # (4,) m, added to the shank extent
    ball_mass_scale: float
    ball_radius_scale: float
    friction: float
    restitution: float
    init_joint_delta: np.ndarray   # (12,) rad
    init_ball_offset: np.ndarray   # (2,) m, horizontal


def _uniform_about_mid(rng, lo: float, hi: float, factor: float) -> float:
    """Uniform draw from the range shrunk toward its midpoint by `factor`."""
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * factor
    return float(rng.uniform(mid - half, mid + half))


def sample_domain(rng, cfg: RandomizationConfig, factor: float) -> RandomizationSample:
    """Draw one episode's model randomization, scaled by the curriculum factor.

    The draw order is fixed, so a given generator state always yields the
    same sample regardless of the factor value.
    """
    if not 0.0 <= factor <= 1.0:
        raise ValueError("curriculum factor must lie in [0, 1]")
    shank_pos = rng.normal(0.0, 1.0, (4, 3)) * (cfg.shank_noise_std * factor)
    shank_len = rng.normal(0.0, 1.0, 4) * (cfg.shank_noise_std * factor)
    mass_scale = _uniform_about_mid(rng, 1.0 - cfg.ball_mass_rel, 1.0 + cfg.ball_mass_rel, factor)
    radius_scale = _uniform_about_mid(rng, 1.0 - cfg.ball_radius_rel, 1.0 + cfg.ball_radius_rel, factor)
    friction = _uniform_about_mid(rng, cfg.friction_range[0], cfg.friction_range[1], factor)
    restitution = _uniform_about_mid(rng, cfg.restitution_range[0], cfg.restitution_range[1], factor)
    init_joints = rng.normal(0.0, 1.0, 12) * (cfg.init_joint_pos_std * factor)
    init_ball = rng.normal(0.0, 1.0, 2) * (cfg.init_ball_offset_std * factor)
    return RandomizationSample(
        shank_pos_delta=shank_pos,
        shank_len_delta=shank_len,
        ball_mass_scale=mass_scale,
        ball_radius_scale=radius_scale,
        friction=friction,
        restitution=restitution,
        init_joint_delta=init_joints,
        init_ball_offset=init_ball,
    )


def perturb_observation(frame, rng, cfg: RandomizationConfig, factor: float):
    """Measurement noise on one 43-scalar frame; returns a new array.

    Joint states and the ball position get additive Gaussian noise; the
    orientation difference is rotated by a small random rotation (per-axis
    Gaussian rotation vector) and re-normalized. The previous-action entries
    are the policy's own output, not a measurement, and are never touched.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (FRAME_DIM,):
        raise ValueError(f"frame must have shape ({FRAME_DIM},)")
    out = frame.copy()
    if factor == 0.0:
        return out
    out[F_JOINT_POS] += rng.normal(0.0, 1.0, 12) * (cfg.joint_pos_noise_std * factor)
    out[F_JOINT_VEL] += rng.normal(0.0, 1.0, 12) * (cfg.joint_vel_noise_std * factor)
    out[F_BALL_POS] += rng.normal(0.0, 1.0, 3) * (cfg.ball_pos_noise_std * factor)
    rotvec = rng.normal(0.0, 1.0, 3) * (cfg.ball_ori_noise_std * factor)
    out[F_QUAT_DIFF] = quat_compose(quat_exp(rotvec), out[F_QUAT_DIFF])
    return out


@dataclass(frozen=True)
class DisturbanceConfig:
    """External pushes on the ball: a fixed-magnitude force in a random
    direction, held for `duration`, drawn once per decision window."""

    magnitude: float = 50.0     # N
    duration: float = 0.4       # s
    probability: float = 0.2    # per decision window
    window: float = 1.0         # s

    def validate(self) -> None:
        if not (math.isfinite(self.magnitude) and self.magnitude >= 0):
            raise ValueError("magnitude must be non-negative")
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ValueError("duration must be positive")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        if not (math.isfinite(self.window) and self.window > 0):
            raise ValueError("window must be positive")


class DisturbanceSchedule:
    """Pre-drawn disturbance timeline for one episode.

    At the start of each decision window a Bernoulli draw decides whether a
    push begins at a uniformly random control step inside that window; an
    active push suppresses new draws until it ends, so pushes never overlap.
    Each activation lasts exactly duration/control_dt steps and its force
    vector has norm exactly `magnitude` with a fixed random direction.

    Pre-drawing the whole horizon keeps the episode deterministic in the
    generator state no matter how the forces are queried.
    """

    def __init__(self, rng, cfg: DisturbanceConfig, control_dt: float, horizon_steps: int):
        cfg.validate()
        self.cfg = cfg
        self._forces = np.zeros((max(0, int(horizon_steps)), 3))
        window_steps = max(1, int(round(cfg.window / control_dt)))
        active_steps = max(1, int(round(cfg.duration / control_dt)))
        active_until = 0
        for start in range(0, int(horizon_steps), window_steps):
            if start < active_until:
                continue
            if rng.uniform() >= cfg.probability:
                continue
            offset = int(rng.integers(0, window_steps))
            direction = rng.normal(0.0, 1.0, 3)
            norm = float(np.linalg.norm(direction))
            while norm < 1e-12:
                direction = rng.normal(0.0, 1.0, 3)
                norm = float(np.linalg.norm(direction))
            begin = start + offset
            end = min(begin + active_steps, int(horizon_steps))
            self._forces[begin:end] = direction / norm * cfg.magnitude
            active_until = begin + active_steps

    def force_at(self, step_index: int) -> np.ndarray:
        """Force vector (N) applied at the ball's center during this step."""
        if 0 <= step_index < len(self._forces):
            return self._forces[step_index]
        return np.zeros(3)

    @property
    def active_steps_total(self) -> int:
        return int(np.count_nonzero(np.linalg.norm(self._forces, axis=1) > 0))
