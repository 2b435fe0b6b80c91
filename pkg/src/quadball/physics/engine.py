"""Simulator front end: backend selection, stepping, contacts, energy audit."""

from __future__ import annotations

import os

import numpy as np

from . import _layout as L
from .params import CONTROL_DT, PhysicsConfig, build_model
from .state import (
    BallState,
    ContactPoint,
    RobotState,
    contacts_from_rows,
    pack_state,
    unpack_state,
)


class NonFiniteState(RuntimeError):
    """The integrator produced NaN or infinity; the episode cannot continue."""


def available_backends() -> list:
    out = ["python"]
    try:
        from . import _kernel_cy  # noqa: F401

        out.insert(0, "compiled")
    except ImportError:
        pass
    return out


def _load_kernel(backend: str):
    if backend == "auto":
        backend = os.environ.get("QUADBALL_BACKEND", "auto")
    if backend in ("auto", "compiled"):
        try:
            from . import _kernel_cy

            return _kernel_cy, "compiled"
        except ImportError:
            if backend == "compiled":
                raise RuntimeError(
                    "compiled physics kernel requested but not built; "
                    "reinstall with Cython available or use backend='python'"
                )
    from . import _kernel_py

    return _kernel_py, "python"


class PhysicsEngine:
    """One simulated scene: a supine robot, a ball, and the ground plane.

    The engine owns its scratch buffers, so instances are cheap but must not
    be shared between threads. `model` defaults to `build_model(cfg)`; pass a
    randomized model for domain-randomized episodes.
    """

    def __init__(self, cfg: PhysicsConfig | None = None, model=None, backend: str = "auto"):
        self.cfg = cfg if cfg is not None else PhysicsConfig()
        self.model = np.array(build_model(self.cfg) if model is None else model, dtype=float)
        if self.model.shape != (L.N_MODEL,):
            raise ValueError(f"model vector must have shape ({L.N_MODEL},)")
        self._kernel, self.backend_name = _load_kernel(backend)
        self._work = np.zeros(105)
        self._rows = np.zeros((L.MAX_CONTACTS, L.N_CONTACT_COLS))
        self._tau = np.zeros(12)
        self._s_in = np.zeros(L.N_STATE)
        self._s_out = np.zeros(L.N_STATE)
        self._feet = np.zeros(12)
        self._no_force = np.zeros(3)

    @property
    def control_dt(self) -> float:
        return CONTROL_DT

    # --- raw array interface (hot path) ----------------------------------
    def step_array(self, s_in, s_out, targets, ext_force, tau_mean, rows) -> int:
        """Advance one control step on packed buffers; returns the contact
        row count from the final substep. Raises NonFiniteState."""
        n = self._kernel.step(s_in, s_out, self.model, targets, ext_force, tau_mean, rows, self._work)
        if n < 0:
            raise NonFiniteState("simulation state became non-finite")
        return n

    def detect_array(self, s, rows) -> int:
        return self._kernel.detect(s, self.model, rows, self._work)

    # --- structured interface ---------------------------------------------
    def step(
        self,
        robot: RobotState,
        ball: BallState,
        joint_targets,
        external_force=None,
    ):
        """One 10 ms control step holding `joint_targets` on the PD loops.

        Returns (robot, ball, mean_torque, contacts) where mean_torque is the
        per-joint applied torque averaged over the substeps and contacts are
        the final substep's contact points (including detection-only pairs).
        """
        targets = np.asarray(joint_targets, dtype=float)
        if targets.shape != (12,):
            raise ValueError("joint_targets must have shape (12,)")
        ext = self._no_force if external_force is None else np.asarray(external_force, dtype=float)
        self._s_in[:] = pack_state(robot, ball)
        n = self.step_array(self._s_in, self._s_out, targets, ext, self._tau, self._rows)
        new_robot, new_ball = unpack_state(self._s_out)
        return new_robot, new_ball, self._tau.copy(), contacts_from_rows(self._rows, n)

    def detect_contacts(self, robot: RobotState, ball: BallState) -> list:
        s = pack_state(robot, ball)
        n = self.detect_array(s, self._rows)
        return contacts_from_rows(self._rows, n)

    def forward_kinematics(self, base_pos, base_quat, joint_pos) -> np.ndarray:
        """World positions of the four foot centers, rows LF RF LH RH."""
        robot = RobotState(
            base_pos=np.asarray(base_pos, dtype=float),
            base_quat=np.asarray(base_quat, dtype=float),
            joint_pos=np.asarray(joint_pos, dtype=float),
        )
        s = pack_state(robot, BallState())
        self._kernel.fk_world(s, self.model, self._feet, self._work)
        return self._feet.reshape(4, 3).copy()

    def mechanical_energy(self, robot: RobotState, ball: BallState) -> float:
        """Kinetic + gravitational + contact-spring energy of the scene.

        The spring term covers force-bearing contacts only; detection-only
        pairs never exert forces so they store no energy.
        """
        m = self.model
        from ..rotation import quat_to_matrix

        r_base = quat_to_matrix(robot.base_quat)
        w_body = r_base.T @ robot.base_ang_vel
        inertia = m[L.M_BASE_INERTIA : L.M_BASE_INERTIA + 3]
        ke = 0.5 * m[L.M_BASE_MASS] * float(robot.base_lin_vel @ robot.base_lin_vel)
        ke += 0.5 * float(w_body @ (inertia * w_body))
        ke += 0.5 * m[L.M_JOINT_INERTIA] * float(robot.joint_vel @ robot.joint_vel)
        ke += 0.5 * m[L.M_BALL_MASS] * float(ball.lin_vel @ ball.lin_vel)
        ke += 0.5 * m[L.M_BALL_INERTIA] * float(ball.ang_vel @ ball.ang_vel)
        pe = m[L.M_GRAVITY] * (
            m[L.M_BASE_MASS] * float(robot.base_pos[2])
            + m[L.M_BALL_MASS] * float(ball.pos[2])
        )
        spring = 0.0
        for c in self.detect_contacts(robot, ball):
            if _is_force_pair(c.body_a, c.body_b):
                spring += 0.5 * m[L.M_CONTACT_STIFFNESS] * c.penetration * c.penetration
        return ke + pe + spring


def _is_force_pair(a: int, b: int) -> bool:
    if a == L.BODY_GROUND:
        return True
    return L.BODY_FOOT0 <= a < L.BODY_FOOT0 + 4 and b == L.BODY_BALL


def make_contact_point(*args, **kwargs) -> ContactPoint:
    return ContactPoint(*args, **kwargs)
