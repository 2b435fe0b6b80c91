"""Physical parameters and the packed model vector consumed by the kernels.

Geometry convention: the base frame is aligned with the world frame when the
robot lies flat on its back, so +z points from the back plate through the
belly and the legs extend upward. Legs are ordered LF, RF, LH, RH; each leg is
hip-abduction (roll about +x), hip-flexion (pitch about +y after the roll) and
knee-flexion (pitch about the same rolled +y axis).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _layout as L

CONTROL_DT = 0.01  # the control step is fixed at 100 Hz

# Supine cradle pose: knees folded outward so the feet form a square basket
# above the belly, solved for foot targets (+-0.22, +-0.22, 0.56) in the base
# frame. Order LF RF LH RH x (HAA, HFE, KFE).
NOMINAL_JOINT_POS = (
    0.18401, 0.50563, -1.50762,
    -0.18401, 0.50563, -1.50762,
    0.18401, -0.50563, 1.50762,
    -0.18401, -0.50563, 1.50762,
)

# Ball center height (world z) once the ball has settled into the nominal
# cradle under gravity, measured by simulating the default model to rest.
NOMINAL_BALL_HEIGHT = 0.9345

_JOINT_HALF_RANGE = 0.6


def _default_joint_limits():
    lo = tuple(q - _JOINT_HALF_RANGE for q in NOMINAL_JOINT_POS)
    hi = tuple(q + _JOINT_HALF_RANGE for q in NOMINAL_JOINT_POS)
    return lo, hi


def _box_inertia(mass, half):
    hx, hy, hz = half
    return (
        mass / 3.0 * (hy * hy + hz * hz),
        mass / 3.0 * (hx * hx + hz * hz),
        mass / 3.0 * (hx * hx + hy * hy),
    )


@dataclass(frozen=True)
class PhysicsConfig:
    """Everything the simulator needs; all units SI, angles in radians."""

    substep_dt: float = 0.001
    gravity: float = 9.81

    base_mass: float = 40.0
    base_half_extents: tuple = (0.465, 0.265, 0.12)
    base_inertia: tuple = ()  # empty = derive from mass and box extents

    hip_x: float = 0.36
    hip_y: float = 0.19
    hip_z: float = 0.12  # legs attach on the belly face
    hip_lateral_offset: float = 0.11
    thigh_length: float = 0.285
    shank_length: float = 0.33
    foot_radius: float = 0.03

    ball_mass: float = 3.0
    ball_radius: float = 0.4
    ball_inertia_factor: float = 2.0 / 3.0  # thin shell

    contact_stiffness: float = 1.0e4
    friction_mu: float = 0.8
    restitution: float = 0.95
    friction_vel_tolerance: float = 0.1

    joint_kp: float = 60.0
    joint_kd: float = 3.0
    torque_limit: float = 80.0
    joint_reflected_inertia: float = 0.1

    nominal_joint_pos: tuple = NOMINAL_JOINT_POS
    joint_limits_lo: tuple = field(default_factory=lambda: _default_joint_limits()[0])
    joint_limits_hi: tuple = field(default_factory=lambda: _default_joint_limits()[1])
    nominal_ball_height: float = NOMINAL_BALL_HEIGHT

    def __post_init__(self):
        if not self.base_inertia:
            object.__setattr__(
                self, "base_inertia", _box_inertia(self.base_mass, self.base_half_extents)
            )
        self.validate()

    def validate(self):
        if self.substep_dt <= 0.0:
            raise ValueError("substep_dt must be positive")
        n = CONTROL_DT / self.substep_dt
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError(
                f"substep_dt {self.substep_dt} must divide the {CONTROL_DT} s control step"
            )
        for name in ("base_mass", "ball_mass", "ball_radius", "foot_radius",
                     "contact_stiffness", "joint_reflected_inertia", "gravity",
                     "thigh_length", "shank_length"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.friction_mu < 0.0:
            raise ValueError("friction_mu must be non-negative")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if self.friction_vel_tolerance <= 0.0:
            raise ValueError("friction_vel_tolerance must be positive")
        if self.torque_limit <= 0.0:
            raise ValueError("torque_limit must be positive")
        if len(self.nominal_joint_pos) != 12:
            raise ValueError("nominal_joint_pos must have 12 entries")
        if len(self.joint_limits_lo) != 12 or len(self.joint_limits_hi) != 12:
            raise ValueError("joint limits must have 12 entries each")
        for j in range(12):
            lo, hi = self.joint_limits_lo[j], self.joint_limits_hi[j]
            if not lo < hi:
                raise ValueError(f"joint {j}: lower limit must be below upper limit")
            if not lo <= self.nominal_joint_pos[j] <= hi:
                raise ValueError(f"joint {j}: nominal position outside limits")

    @property
    def n_substeps(self) -> int:
        return round(CONTROL_DT / self.substep_dt)

    def hip_positions(self) -> np.ndarray:
        """Hip attachment points in the base frame, rows LF RF LH RH."""
        x, y, z = self.hip_x, self.hip_y, self.hip_z
        return np.array(
            [[x, y, z], [x, -y, z], [-x, y, z], [-x, -y, z]]
        )

    def lateral_signs(self) -> np.ndarray:
        return np.array([1.0, -1.0, 1.0, -1.0])


def build_model(
    cfg: PhysicsConfig,
    *,
    ball_mass_scale: float = 1.0,
    ball_radius_scale: float = 1.0,
    friction_mu: float | None = None,
    restitution: float | None = None,
    shank_pos_delta: np.ndarray | None = None,
    shank_len_delta: np.ndarray | None = None,
) -> np.ndarray:
    """Pack a config plus per-episode randomization into a kernel model vector.

    `shank_pos_delta` (4,3) displaces each shank mount point (the far end of
    the thigh link) in the leg's pitched frame; `shank_len_delta` (4,) adds to
    each shank length.
    """
    m = np.zeros(L.N_MODEL)
    m[L.M_DT_SUB] = cfg.substep_dt
    m[L.M_N_SUB] = float(cfg.n_substeps)
    m[L.M_GRAVITY] = cfg.gravity
    m[L.M_BASE_MASS] = cfg.base_mass
    m[L.M_BASE_INERTIA : L.M_BASE_INERTIA + 3] = cfg.base_inertia
    m[L.M_BASE_HALF : L.M_BASE_HALF + 3] = cfg.base_half_extents

    ball_mass = cfg.ball_mass * ball_mass_scale
    ball_radius = cfg.ball_radius * ball_radius_scale
    if ball_mass <= 0.0 or ball_radius <= 0.0:
        raise ValueError("randomized ball mass and radius must stay positive")
    m[L.M_BALL_MASS] = ball_mass
    m[L.M_BALL_RADIUS] = ball_radius
    m[L.M_BALL_INERTIA] = cfg.ball_inertia_factor * ball_mass * ball_radius * ball_radius

    m[L.M_CONTACT_STIFFNESS] = cfg.contact_stiffness
    m[L.M_FRICTION_MU] = cfg.friction_mu if friction_mu is None else friction_mu
    m[L.M_RESTITUTION] = cfg.restitution if restitution is None else restitution
    if m[L.M_FRICTION_MU] < 0.0 or not 0.0 <= m[L.M_RESTITUTION] <= 1.0:
        raise ValueError("randomized contact parameters out of range")
    m[L.M_FRICTION_VTOL] = cfg.friction_vel_tolerance
    m[L.M_KP] = cfg.joint_kp
    m[L.M_KD] = cfg.joint_kd
    m[L.M_TAU_MAX] = cfg.torque_limit
    m[L.M_JOINT_INERTIA] = cfg.joint_reflected_inertia
    m[L.M_FOOT_RADIUS] = cfg.foot_radius

    m[L.M_HIP : L.M_HIP + 12] = cfg.hip_positions().ravel()
    signs = cfg.lateral_signs()
    for leg in range(4):
        m[L.M_HIP_OFFSET + 3 * leg + 1] = signs[leg] * cfg.hip_lateral_offset
        m[L.M_THIGH + 3 * leg + 2] = cfg.thigh_length
        m[L.M_SHANK + 3 * leg + 2] = cfg.shank_length
        if shank_pos_delta is not None:
            m[L.M_THIGH + 3 * leg : L.M_THIGH + 3 * leg + 3] += shank_pos_delta[leg]
        if shank_len_delta is not None:
            m[L.M_SHANK + 3 * leg + 2] += shank_len_delta[leg]
        if m[L.M_SHANK + 3 * leg + 2] <= 0.0:
            raise ValueError("randomized shank length must stay positive")

    m[L.M_Q_LO : L.M_Q_LO + 12] = cfg.joint_limits_lo
    m[L.M_Q_HI : L.M_Q_HI + 12] = cfg.joint_limits_hi
    return m
