"""Rigid-body simulator: supine quadruped, ball, ground plane.

The hot loop lives in a compiled kernel when available and in a pure-Python
mirror otherwise; both produce bit-identical trajectories.
"""

from .engine import NonFiniteState, PhysicsEngine, available_backends
from .params import CONTROL_DT, PhysicsConfig, build_model
from .state import (
    BODY_NAMES,
    BallState,
    ContactPoint,
    RobotState,
    default_ball_state,
    default_robot_state,
    pack_state,
    unpack_state,
)
from . import _layout as layout

__all__ = [
    "NonFiniteState",
    "PhysicsEngine",
    "available_backends",
    "CONTROL_DT",
    "PhysicsConfig",
    "build_model",
    "BODY_NAMES",
    "BallState",
    "ContactPoint",
    "RobotState",
    "default_ball_state",
    "default_robot_state",
    "pack_state",
    "unpack_state",
    "layout",
]
