"""Unit-quaternion math used across the simulator and reward code.

Quaternions are plain float64 arrays of shape (4,) in scalar-first order
(w, x, y, z). Every constructor and operation returns the canonical
representative with w >= 0, so a rotation has exactly one encoding and
angle extraction never sees the double cover.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle the exp map switches to its series expansion;
# sin(h)/h evaluated directly would lose all precision near zero.
SMALL_ANGLE = 1e-8

# Target-update periods the scheduler may command (1, 2, and 3 Hz).
ALLOWED_PERIODS = (1.0, 0.5, 0.33)


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Rescale to unit norm and flip sign so that w >= 0."""
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b: the rotation b followed by a."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return quat_normalize(
        np.array(
            [
                aw * bw - ax * bx - ay * by - az * bz,
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by - ax * bz + ay * bw + az * bx,
                aw * bz + ax * by - ay * bx + az * bw,
            ]
        )
    )


def quat_inverse(q: np.ndarray) -> np.ndarray:
    """Conjugate; inputs are unit quaternions so no norm division is needed."""
    return quat_normalize(np.array([q[0], -q[1], -q[2], -q[3]]))


def quat_angle(q: np.ndarray) -> float:
    """Geodesic rotation angle in [0, pi].

    Uses |w| so both representatives of a rotation give the same angle, and
    clamps before acos: normalization can leave w a few ulp above 1.
    """
    return 2.0 * math.acos(min(1.0, abs(float(q[0]))))


def quat_diff(current: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotation taking `current` onto `target`, canonicalized."""
    return quat_compose(target, quat_inverse(current))


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = math.sqrt(float(axis @ axis))
    if n == 0.0:
        raise ValueError("axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = math.cos(half)
    q[1:] = axis * (math.sin(half) / n)
    return quat_normalize(q)


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Exp map from a rotation vector (axis * angle) to a unit quaternion."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = math.sqrt(float(rotvec @ rotvec))
    half = 0.5 * angle
    if angle < SMALL_ANGLE:
        # sin(h)/angle = 1/2 - angle^2/48 + O(angle^4); at this threshold the
        # truncation error is far below one ulp.
        scale = 0.5 - angle * angle / 48.0
    else:
        scale = math.sin(half) / angle
    q = np.empty(4)
    q[0] = math.cos(half)
    q[1:] = rotvec * scale
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q using the expanded sandwich product."""
    w = float(q[0])
    u = np.asarray(q[1:4], dtype=float)
    v = np.asarray(v, dtype=float)
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd extraction: branch on the largest diagonal combination."""
    m = np.asarray(m, dtype=float)
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (m[2, 1] - m[1, 2]) / s,
                (m[0, 2] - m[2, 0]) / s,
                (m[1, 0] - m[0, 1]) / s,
            ]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[2, 1] - m[1, 2]) / s,
                0.25 * s,
                (m[0, 1] + m[1, 0]) / s,
                (m[0, 2] + m[2, 0]) / s,
            ]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[0, 2] - m[2, 0]) / s,
                (m[0, 1] + m[1, 0]) / s,
                0.25 * s,
                (m[1, 2] + m[2, 1]) / s,
            ]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [
                (m[1, 0] - m[0, 1]) / s,
                (m[0, 2] + m[2, 0]) / s,
                (m[1, 2] + m[2, 1]) / s,
                0.25 * s,
            ]
        )
    return quat_normalize(q)


@dataclass(frozen=True)
class AngularVelocityCommand:
    """Commanded ball rotation: a world-frame unit axis and a speed.

    `update_period` is how often the target orientation advances along this
    command; only the scheduler's discrete periods are accepted.
    """

    axis: np.ndarray
    magnitude: float
    update_period: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        n = math.sqrt(float(axis @ axis))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"command axis must be unit length, got norm {n!r}")
        object.__setattr__(self, "axis", axis)
        if self.magnitude < 0.0:
            raise ValueError("command magnitude must be non-negative")
        if self.update_period not in ALLOWED_PERIODS:
            raise ValueError(
                f"update_period must be one of {ALLOWED_PERIODS}, "
                f"got {self.update_period!r}"
            )


def propagate_target(
    current_target: np.ndarray, command: AngularVelocityCommand
) -> np.ndarray:
    """Advance the target orientation by one command period.

    The increment exp(axis * magnitude * period) is a world-frame rotation,
    so it composes onto the left of the current target.
    """
    step = quat_exp(command.axis * (command.magnitude * command.update_period))
    return quat_compose(step, current_target)
