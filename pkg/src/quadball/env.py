"""The ball-rotation MDP.

An episode: the supine robot cradles the ball on its four feet and is asked
to rotate it at a commanded angular velocity about a commanded world axis.
Observations stack the last three sensed frames plus the time remaining until
the target orientation next advances. Reward has five terms; four early
termination rules end hopeless episodes.

The env owns all per-episode randomness through named seed streams keyed by
(master seed, env index, episode index, purpose), so trajectories are exactly
reproducible regardless of how envs are scheduled across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .curriculum import CurriculumState, sample_command
from .physics import (
    CONTROL_DT,
    BallState,
    NonFiniteState,
    PhysicsConfig,
    PhysicsEngine,
    RobotState,
    build_model,
    default_ball_state,
    default_robot_state,
    layout,
)
from .randomize import (
    F_BALL_POS,
    F_JOINT_POS,
    F_JOINT_VEL,
    F_PREV_ACTION,
    F_QUAT_DIFF,
    FRAME_DIM,
    DisturbanceConfig,
    DisturbanceSchedule,
    RandomizationConfig,
    perturb_observation,
    sample_domain,
)
from .rotation import (
    AngularVelocityCommand,
    quat_angle,
    quat_compose,
    quat_inverse,
    quat_normalize,
    quat_rotate,
)
from .rotation import propagate_target as _propagate_target

OBS_DIM = 3 * FRAME_DIM + 1
HISTORY_LEN = 3


class ResetFailed(RuntimeError):
    """The settle phase ended in a terminal or contact-free state."""


class Verdict(Enum):
    NONE = "none"
    SELF_COLLISION = "self_collision"
    ILLEGAL_CONTACT = "illegal_contact"
    OUT_OF_REGION = "out_of_region"
    NO_CONTACT_TIMEOUT = "no_contact_timeout"
    NON_FINITE = "non_finite"


@dataclass(frozen=True)
class RewardCoefficients:
    k_q: float = 1.0
    k_v: float = 0.5
    k_tau: float = 1e-4
    k_slip: float = 0.1
    k_collide: float = 0.1

    def validate(self) -> None:
        for name in ("k_q", "k_v", "k_tau", "k_slip", "k_collide"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r_q: float
    r_v: float
    r_tau: float
    r_slip: float
    r_collide: float
    total: float

    @staticmethod
    def zero() -> "RewardBreakdown":
        return RewardBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TerminationConfig:
    # Region multipliers are in units of the episode's sampled ball radius,
    # measured from the ball's nominal rest position.
    horizontal_region: float = 1.5
    vertical_region: float = 1.0
    max_no_contact_time: float = 1.0

    def validate(self) -> None:
        if min(self.horizontal_region, self.vertical_region,
               self.max_no_contact_time) <= 0.0:
            raise ValueError("termination thresholds must be positive")


def _is_foot(body: int) -> bool:
    return layout.BODY_FOOT0 <= body < layout.BODY_FOOT0 + 4


def is_foot_ball(contact) -> bool:
    a, b = contact.body_a, contact.body_b
    return (_is_foot(a) and b == layout.BODY_BALL) or (_is_foot(b) and a == layout.BODY_BALL)


def _is_self_collision(contact) -> bool:
    a, b = contact.body_a, contact.body_b
    if _is_foot(a) and _is_foot(b):
        return True
    return (_is_foot(a) and b == layout.BODY_BASE) or (_is_foot(b) and a == layout.BODY_BASE)


def _is_ball_base(contact) -> bool:
    a, b = contact.body_a, contact.body_b
    return {a, b} == {layout.BODY_BALL, layout.BODY_BASE}


def build_frame(robot: RobotState, ball: BallState, target: np.ndarray,
                prev_action: np.ndarray) -> np.ndarray:
    """One 43-scalar sensed frame (noise is applied separately)."""
    frame = np.empty(FRAME_DIM)
    frame[F_JOINT_POS] = robot.joint_pos
    frame[F_JOINT_VEL] = robot.joint_vel
    frame[F_BALL_POS] = quat_rotate(quat_inverse(robot.base_quat),
                                    ball.pos - robot.base_pos)
    frame[F_QUAT_DIFF] = quat_compose(quat_inverse(ball.quat), target)
    frame[F_PREV_ACTION] = prev_action
    return frame


def build_observation(frames, t_remain: float, update_period: float) -> np.ndarray:
    """Flatten the newest-first frame stack and append normalized t_remain."""
    if len(frames) != HISTORY_LEN:
        raise ValueError(f"expected {HISTORY_LEN} frames, got {len(frames)}")
    obs = np.empty(OBS_DIM)
    for i, frame in enumerate(frames):
        if frame.shape != (FRAME_DIM,):
            raise ValueError("frames must be 43-vectors")
        obs[i * FRAME_DIM:(i + 1) * FRAME_DIM] = frame
    obs[-1] = t_remain / update_period
    return obs


def compute_reward(robot: RobotState, ball: BallState, torques: np.ndarray,
                   contacts, target: np.ndarray,
                   coeffs: RewardCoefficients) -> RewardBreakdown:
    """Five-term step reward; slip and collision sum over foot-ball contacts."""
    dq = quat_angle(quat_compose(quat_inverse(ball.quat), target))
    r_q = coeffs.k_q / (math.exp(dq) + 2.0 + math.exp(-dq))
    r_v = -coeffs.k_v * float(np.linalg.norm(robot.base_lin_vel))
    r_tau = -coeffs.k_tau * float(np.dot(torques, torques))
    slip = 0.0
    collide = 0.0
    for c in contacts:
        if is_foot_ball(c):
            slip += float(np.linalg.norm(c.tangential_velocity))
            collide += abs(c.normal_velocity)
    r_slip = -coeffs.k_slip * slip
    r_collide = -coeffs.k_collide * collide
    total = r_q + r_v + r_tau + r_slip + r_collide
    return RewardBreakdown(r_q, r_v, r_tau, r_slip, r_collide, total)


def check_termination(robot: RobotState, ball: BallState, contacts,
                      no_contact_time: float, cfg: TerminationConfig, *,
                      ball_radius: float, rest_position: np.ndarray) -> Verdict:
    """First matching rule wins; order is part of the contract."""
    if any(_is_self_collision(c) for c in contacts):
        return Verdict.SELF_COLLISION
    if any(_is_ball_base(c) for c in contacts):
        return Verdict.ILLEGAL_CONTACT
    dx = ball.pos[0] - rest_position[0]
    dy = ball.pos[1] - rest_position[1]
    dz = ball.pos[2] - rest_position[2]
    lim_h = cfg.horizontal_region * ball_radius
    lim_v = cfg.vertical_region * ball_radius
    if abs(dx) > lim_h or abs(dy) > lim_h or abs(dz) > lim_v:
        return Verdict.OUT_OF_REGION
    if no_contact_time > cfg.max_no_contact_time:
        return Verdict.NO_CONTACT_TIMEOUT
    return Verdict.NONE


class BallRotationEnv:
    """One independent episode generator; not shared across threads.

    Seed-stream purposes: 0 domain sample, 1 per-step observation noise,
    2 disturbance schedule, 3 command sampling. The episode index advances on
    every reset attempt, so a caller recovering from ResetFailed gets fresh
    draws by simply calling reset() again.
    """

    SETTLE_TIME = 0.8
    SETTLE_MIN_STEPS = 30

    def __init__(self, master_seed: int = 0, env_index: int = 0,
                 phys_cfg: PhysicsConfig | None = None,
                 reward_coeffs: RewardCoefficients | None = None,
                 termination: TerminationConfig | None = None,
                 rand_cfg: RandomizationConfig | None = None,
                 disturb_cfg: DisturbanceConfig | None = None,
                 max_episode_steps: int = 1000, backend: str = "auto"):
        self.master_seed = int(master_seed)
        self.env_index = int(env_index)
        self.phys_cfg = phys_cfg if phys_cfg is not None else PhysicsConfig()
        self.reward_coeffs = reward_coeffs if reward_coeffs is not None else RewardCoefficients()
        self.termination = termination if termination is not None else TerminationConfig()
        self.rand_cfg = rand_cfg if rand_cfg is not None else RandomizationConfig()
        self.disturb_cfg = disturb_cfg if disturb_cfg is not None else DisturbanceConfig()
        self.max_episode_steps = int(max_episode_steps)
        self._backend = backend
        self.reward_coeffs.validate()
        self.termination.validate()
        self.episode_index = -1
        self._done = True
        self._engine = None
        # Vertical gap between the mean foot height and the resting ball
        # center in the unperturbed geometry; reused to spawn the ball just
        # above perturbed cradles.
        nominal = PhysicsEngine(self.phys_cfg, backend=backend)
        rest = default_robot_state(self.phys_cfg)
        feet = nominal.forward_kinematics(rest.base_pos, rest.base_quat, rest.joint_pos)
        self._ball_standoff = self.phys_cfg.nominal_ball_height - float(feet[:, 2].mean())

    # --- seeding ----------------------------------------------------------
    def stream(self, purpose: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            [self.master_seed, self.env_index, self.episode_index, purpose])
        return np.random.default_rng(seq)

    # --- lifecycle ---------------------------------------------------------
    def reset(self, curriculum: CurriculumState,
              command: AngularVelocityCommand | None = None) -> np.ndarray:
        self.episode_index += 1
        factor = curriculum.factor
        rng_domain = self.stream(0)
        self._rng_obs = self.stream(1)
        rng_disturb = self.stream(2)
        rng_command = self.stream(3)

        self.domain = sample_domain(rng_domain, self.rand_cfg, factor)
        self.factor = factor
        model = build_model(
            self.phys_cfg,
            ball_mass_scale=self.domain.ball_mass_scale,
            ball_radius_scale=self.domain.ball_radius_scale,
            friction_mu=self.domain.friction,
            restitution=self.domain.restitution,
            shank_pos_delta=self.domain.shank_pos_delta,
            shank_len_delta=self.domain.shank_len_delta,
        )
        self._engine = PhysicsEngine(self.phys_cfg, model=model, backend=self._backend)
        self.ball_radius = self.phys_cfg.ball_radius * self.domain.ball_radius_scale
        self.rest_position = np.array([
            0.0, 0.0,
            self.phys_cfg.nominal_ball_height + (self.ball_radius - self.phys_cfg.ball_radius),
        ])

        robot = default_robot_state(self.phys_cfg)
        lo = model[layout.M_Q_LO:layout.M_Q_LO + 12]
        hi = model[layout.M_Q_HI:layout.M_Q_HI + 12]
        robot.joint_pos = np.clip(robot.joint_pos + self.domain.init_joint_delta, lo, hi)
        # Drop the ball over the actual cradle center: shank and joint noise
        # move the feet, and a nominally placed ball would roll off.
        feet = self._engine.forward_kinematics(
            robot.base_pos, robot.base_quat, robot.joint_pos)
        cradle = feet.mean(axis=0)
        ball = default_ball_state(self.phys_cfg)
        ball.pos[0] = cradle[0] + self.domain.init_ball_offset[0]
        ball.pos[1] = cradle[1] + self.domain.init_ball_offset[1]
        # Spawn height: at least the nominal standoff over the mean foot, and
        # clear of every foot sphere by a small gap, so uneven cradles never
        # start in deep penetration (the contact spring would fire the ball).
        z = cradle[2] + self._ball_standoff + (self.ball_radius - self.phys_cfg.ball_radius)
        reach = self.ball_radius + self.phys_cfg.foot_radius + 0.005
        for foot in feet:
            h2 = (ball.pos[0] - foot[0]) ** 2 + (ball.pos[1] - foot[1]) ** 2
            if h2 < reach * reach:
                z = max(z, foot[2] + math.sqrt(reach * reach - h2))
        ball.pos[2] = z

        robot, ball = self._settle(robot, ball)
        self._robot, self._ball = robot, ball

        self.command = command if command is not None else sample_command(
            curriculum, rng_command)
        self.target = quat_normalize(self._ball.quat)
        self._period_steps = int(round(self.command.update_period / CONTROL_DT))
        self._countdown = self._period_steps
        self._schedule = DisturbanceSchedule(
            rng_disturb, self.disturb_cfg, CONTROL_DT, self.max_episode_steps)
        self.prev_action = np.zeros(12)
        self.no_contact_time = 0.0
        self.step_count = 0
        self._done = False

        frame = build_frame(self._robot, self._ball, self.target, self.prev_action)
        frame = perturb_observation(frame, self._rng_obs, self.rand_cfg, factor)
        self._frames = [frame.copy() for _ in range(HISTORY_LEN)]
        self._obs = build_observation(
            self._frames, self._countdown * CONTROL_DT, self.command.update_period)
        return self._obs

    def _settle(self, robot: RobotState, ball: BallState):
        """Physics-only hold at the initial pose until the scene is quiet."""
        hold = robot.joint_pos.copy()
        steps = int(round(self.SETTLE_TIME / CONTROL_DT))
        try:
            for i in range(steps):
                robot, ball, _, contacts = self._engine.step(robot, ball, hold)
                if i + 1 >= self.SETTLE_MIN_STEPS and self._quiescent(robot, ball):
                    break
        except NonFiniteState as e:
            raise ResetFailed(f"settle diverged: {e}") from e
        verdict = check_termination(
            robot, ball, contacts, 0.0, self.termination,
            ball_radius=self.ball_radius, rest_position=self.rest_position)
        if verdict is not Verdict.NONE:
            raise ResetFailed(f"settle ended terminal: {verdict.value}")
        if not any(is_foot_ball(c) for c in contacts):
            raise ResetFailed("ball not resting on the feet after settle")
        return robot, ball

    @staticmethod
    def _quiescent(robot: RobotState, ball: BallState) -> bool:
        return (float(np.linalg.norm(ball.lin_vel)) < 0.01
                and float(np.linalg.norm(ball.ang_vel)) < 0.05
                and float(np.max(np.abs(robot.joint_vel))) < 0.05)

    def step(self, action: np.ndarray, disturbance: np.ndarray | None = None):
        """Apply one 10 ms control step; returns (obs, RewardBreakdown, Verdict)."""
        if self._done:
            raise RuntimeError("episode finished; call reset() first")
        action = np.asarray(action, dtype=float)
        if action.shape != (12,):
            raise ValueError("action must have shape (12,)")
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")

        squashed = np.tanh(action)
        model = self._engine.model
        lo = model[layout.M_Q_LO:layout.M_Q_LO + 12]
        hi = model[layout.M_Q_HI:layout.M_Q_HI + 12]
        targets = 0.5 * (lo + hi) + 0.5 * (hi - lo) * squashed

        force = self._schedule.force_at(self.step_count) if disturbance is None \
            else np.asarray(disturbance, dtype=float)
        try:
            robot, ball, tau, contacts = self._engine.step(
                self._robot, self._ball, targets, force)
        except NonFiniteState:
            self._done = True
            return self._obs, RewardBreakdown.zero(), Verdict.NON_FINITE

        self._robot, self._ball = robot, ball
        self.last_torque = tau
        self.last_contacts = contacts
        reward = compute_reward(robot, ball, tau, contacts, self.target,
                                self.reward_coeffs)

        self._countdown -= 1
        if self._countdown <= 0:
            self.target = _propagate_target(self.target, self.command)
            self._countdown = self._period_steps

        if any(is_foot_ball(c) for c in contacts):
            self.no_contact_time = 0.0
        else:
            self.no_contact_time += CONTROL_DT

        verdict = check_termination(
            robot, ball, contacts, self.no_contact_time, self.termination,
            ball_radius=self.ball_radius, rest_position=self.rest_position)
        self.prev_action = squashed
        self.step_count += 1

        frame = build_frame(robot, ball, self.target, self.prev_action)
        frame = perturb_observation(frame, self._rng_obs, self.rand_cfg, self.factor)
        self._frames = [frame] + self._frames[:HISTORY_LEN - 1]
        self._obs = build_observation(
            self._frames, self._countdown * CONTROL_DT, self.command.update_period)
        if verdict is not Verdict.NONE:
            self._done = True
        return self._obs, reward, verdict

    # --- inspection --------------------------------------------------------
    @property
    def done(self) -> bool:
        return self._done

    @property
    def robot(self) -> RobotState:
        return self._robot

    @property
    def ball(self) -> BallState:
        return self._ball

    @property
    def observation(self) -> np.ndarray:
        return self._obs
