"""Structured views of the packed simulation state and contact rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rotation import quat_identity
from . import _layout as L
from .params import PhysicsConfig

BODY_NAMES = {
    L.BODY_GROUND: "ground",
    L.BODY_BASE: "base",
    L.BODY_FOOT0 + 0: "foot_lf",
    L.BODY_FOOT0 + 1: "foot_rf",
    L.BODY_FOOT0 + 2: "foot_lh",
    L.BODY_FOOT0 + 3: "foot_rh",
    L.BODY_BALL: "ball",
}


def _unit_quat(q, what):
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"{what} quaternion must have shape (4,)")
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or abs(n - 1.0) > 1e-9:
        raise ValueError(f"{what} quaternion must be unit length, got norm {n!r}")
    return q


@dataclass
class RobotState:
    base_pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_quat: np.ndarray = field(default_factory=quat_identity)
    base_lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_pos: np.ndarray = field(default_factory=lambda: np.zeros(12))
    joint_vel: np.ndarray = field(default_factory=lambda: np.zeros(12))


@dataclass
class BallState:
    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=quat_identity)
    lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class ContactPoint:
    """One contact as reported by the simulator.

    `normal` points from `body_a` toward `body_b`; `normal_velocity` is the
    relative velocity of b w.r.t. a along it (negative while approaching) and
    `tangential_velocity` the in-plane remainder. Force fields hold what the
    last substep actually applied to `body_b` and are zero for rows that only
    exist for termination checks (self-collision and ball-torso pairs).
    """

    body_a: int
    body_b: int
    position: np.ndarray
    normal: np.ndarray
    penetration: float
    normal_velocity: float
    tangential_velocity: np.ndarray
    normal_force: float = 0.0
    friction_force: np.ndarray = field(default_factory=lambda: np.zeros(3))


def pack_state(robot: RobotState, ball: BallState) -> np.ndarray:
    s = np.zeros(L.N_STATE)
    s[L.S_BASE_POS : L.S_BASE_POS + 3] = robot.base_pos
    s[L.S_BASE_QUAT : L.S_BASE_QUAT + 4] = _unit_quat(robot.base_quat, "base")
    s[L.S_BASE_LVEL : L.S_BASE_LVEL + 3] = robot.base_lin_vel
    s[L.S_BASE_AVEL : L.S_BASE_AVEL + 3] = robot.base_ang_vel
    s[L.S_Q : L.S_Q + 12] = robot.joint_pos
    s[L.S_DQ : L.S_DQ + 12] = robot.joint_vel
    s[L.S_BALL_POS : L.S_BALL_POS + 3] = ball.pos
    s[L.S_BALL_QUAT : L.S_BALL_QUAT + 4] = _unit_quat(ball.quat, "ball")
    s[L.S_BALL_LVEL : L.S_BALL_LVEL + 3] = ball.lin_vel
    s[L.S_BALL_AVEL : L.S_BALL_AVEL + 3] = ball.ang_vel
    if not np.all(np.isfinite(s)):
        raise ValueError("state contains non-finite values")
    return s


def unpack_state(s: np.ndarray) -> tuple[RobotState, BallState]:
    robot = RobotState(
        base_pos=s[L.S_BASE_POS : L.S_BASE_POS + 3].copy(),
        base_quat=s[L.S_BASE_QUAT : L.S_BASE_QUAT + 4].copy(),
        base_lin_vel=s[L.S_BASE_LVEL : L.S_BASE_LVEL + 3].copy(),
        base_ang_vel=s[L.S_BASE_AVEL : L.S_BASE_AVEL + 3].copy(),
        joint_pos=s[L.S_Q : L.S_Q + 12].copy(),
        joint_vel=s[L.S_DQ : L.S_DQ + 12].copy(),
    )
    ball = BallState(
        pos=s[L.S_BALL_POS : L.S_BALL_POS + 3].copy(),
        quat=s[L.S_BALL_QUAT : L.S_BALL_QUAT + 4].copy(),
        lin_vel=s[L.S_BALL_LVEL : L.S_BALL_LVEL + 3].copy(),
        ang_vel=s[L.S_BALL_AVEL : L.S_BALL_AVEL + 3].copy(),
    )
    return robot, ball


def contacts_from_rows(rows: np.ndarray, count: int) -> list[ContactPoint]:
    out = []
    for i in range(count):
        r = rows[i]
        out.append(
            ContactPoint(
                body_a=int(r[L.C_BODY_A]),
                body_b=int(r[L.C_BODY_B]),
                position=r[L.C_POS : L.C_POS + 3].copy(),
                normal=r[L.C_NORMAL : L.C_NORMAL + 3].copy(),
                penetration=float(r[L.C_PEN]),
                normal_velocity=float(r[L.C_VN]),
                tangential_velocity=r[L.C_VT : L.C_VT + 3].copy(),
                normal_force=float(r[L.C_FN]),
                friction_force=r[L.C_FT : L.C_FT + 3].copy(),
            )
        )
    return out


def default_robot_state(cfg: PhysicsConfig) -> RobotState:
    """Supine rest: back plate on the ground, joints at the nominal cradle."""
    return RobotState(
        base_pos=np.array([0.0, 0.0, cfg.base_half_extents[2]]),
        joint_pos=np.array(cfg.nominal_joint_pos),
    )


def default_ball_state(cfg: PhysicsConfig) -> BallState:
    return BallState(pos=np.array([0.0, 0.0, cfg.nominal_ball_height]))
