"""Pure-Python physics kernel; the reference implementation.

The compiled kernel (_kernel_cy.pyx) mirrors this file statement for
statement: every floating-point expression appears in the same order in both,
so the two backends produce bit-identical trajectories. Keep them in sync.

Model: the base is a free rigid box, the ball a free rigid sphere, and each
leg a massless 3-joint chain whose actuated joints are decoupled double
integrators with reflected inertia. Contacts are penalty springs with a
restitution-matched damper and regularized Coulomb friction; all forces that
act on a foot are also transmitted to the base through the leg (wrench at the
foot center plus Jacobian-transpose joint torques), which keeps the power
bookkeeping of every contact exact for the energy audit.

Integration is semi-implicit Euler at the substep level: velocities first
from start-of-substep forces, then positions from the new velocities.
"""

import math

import numpy as np

from . import _layout as L

S_BASE_POS = L.S_BASE_POS
S_BASE_QUAT = L.S_BASE_QUAT
S_BASE_LVEL = L.S_BASE_LVEL
S_BASE_AVEL = L.S_BASE_AVEL
S_Q = L.S_Q
S_DQ = L.S_DQ
S_BALL_POS = L.S_BALL_POS
S_BALL_QUAT = L.S_BALL_QUAT
S_BALL_LVEL = L.S_BALL_LVEL
S_BALL_AVEL = L.S_BALL_AVEL
N_STATE = L.N_STATE

M_DT_SUB = L.M_DT_SUB
M_N_SUB = L.M_N_SUB
M_GRAVITY = L.M_GRAVITY
M_BASE_MASS = L.M_BASE_MASS
M_BASE_INERTIA = L.M_BASE_INERTIA
M_BASE_HALF = L.M_BASE_HALF
M_BALL_MASS = L.M_BALL_MASS
M_BALL_RADIUS = L.M_BALL_RADIUS
M_BALL_INERTIA = L.M_BALL_INERTIA
M_CONTACT_STIFFNESS = L.M_CONTACT_STIFFNESS
M_FRICTION_MU = L.M_FRICTION_MU
M_RESTITUTION = L.M_RESTITUTION
M_FRICTION_VTOL = L.M_FRICTION_VTOL
M_KP = L.M_KP
M_KD = L.M_KD
M_TAU_MAX = L.M_TAU_MAX
M_JOINT_INERTIA = L.M_JOINT_INERTIA
M_FOOT_RADIUS = L.M_FOOT_RADIUS
M_HIP = L.M_HIP
M_HIP_OFFSET = L.M_HIP_OFFSET
M_THIGH = L.M_THIGH
M_SHANK = L.M_SHANK
M_Q_LO = L.M_Q_LO
M_Q_HI = L.M_Q_HI

BODY_GROUND = L.BODY_GROUND
BODY_BASE = L.BODY_BASE
BODY_FOOT0 = L.BODY_FOOT0
BODY_BALL = L.BODY_BALL

C_BODY_A = L.C_BODY_A
C_BODY_B = L.C_BODY_B
C_POS = L.C_POS
C_NORMAL = L.C_NORMAL
C_PEN = L.C_PEN
C_VN = L.C_VN
C_VT = L.C_VT
C_FN = L.C_FN
C_FT = L.C_FT

# Work-buffer layout (scratch owned by the caller, one per engine instance).
W_R = 0        # 9: base rotation matrix, row-major
W_FOOT_B = 9   # 12: foot centers, base frame relative to the base COM
W_FOOT_W = 21  # 12: foot centers, world
W_FOOT_V = 33  # 12: foot center world velocities
W_JAC = 45     # 36: per-leg 3x3 Jacobians, base frame, entry (r,c) at 9k+3r+c
W_F_BASE = 81  # 3
W_T_BASE = 84  # 3
W_F_BALL = 87  # 3
W_T_BALL = 90  # 3
W_TAU_C = 93   # 12: contact torques on the joints
N_WORK = 105

_SMALL_ANGLE = 1e-8

# Force pairs are processed while within this distance of touching so the
# predicted-penetration spring can engage on the approach substep.
_PRED_SLACK = 0.05


def _quat_to_mat(w, x, y, z, R, o):
    R[o + 0] = 1.0 - 2.0 * (y * y + z * z)
    R[o + 1] = 2.0 * (x * y - w * z)
    R[o + 2] = 2.0 * (x * z + w * y)
    R[o + 3] = 2.0 * (x * y + w * z)
    R[o + 4] = 1.0 - 2.0 * (x * x + z * z)
    R[o + 5] = 2.0 * (y * z - w * x)
    R[o + 6] = 2.0 * (x * z - w * y)
    R[o + 7] = 2.0 * (y * z + w * x)
    R[o + 8] = 1.0 - 2.0 * (x * x + y * y)


def _integrate_quat(s, qo, wx, wy, wz, dt):
    """Left-compose exp((wx,wy,wz)*dt) onto the quaternion at s[qo:qo+4]."""
    rx = wx * dt
    ry = wy * dt
    rz = wz * dt
    angle = math.sqrt(rx * rx + ry * ry + rz * rz)
    half = 0.5 * angle
    if angle < _SMALL_ANGLE:
        scale = 0.5 - angle * angle / 48.0
    else:
        scale = math.sin(half) / angle
    dw = math.cos(half)
    dx = rx * scale
    dy = ry * scale
    dz = rz * scale
    qw = s[qo]
    qx = s[qo + 1]
    qy = s[qo + 2]
    qz = s[qo + 3]
    nw = dw * qw - dx * qx - dy * qy - dz * qz
    nx = dw * qx + dx * qw + dy * qz - dz * qy
    ny = dw * qy - dx * qz + dy * qw + dz * qx
    nz = dw * qz + dx * qy - dy * qx + dz * qw
    inv = 1.0 / math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    if nw < 0.0:
        inv = -inv
    s[qo] = nw * inv
    s[qo + 1] = nx * inv
    s[qo + 2] = ny * inv
    s[qo + 3] = nz * inv


def _fk_pass(s, model, work):
    """Rotation matrix, foot positions, velocities, Jacobians for all legs."""
    _quat_to_mat(
        s[S_BASE_QUAT], s[S_BASE_QUAT + 1], s[S_BASE_QUAT + 2], s[S_BASE_QUAT + 3],
        work, W_R,
    )
    bx = s[S_BASE_POS]
    by = s[S_BASE_POS + 1]
    bz = s[S_BASE_POS + 2]
    vx = s[S_BASE_LVEL]
    vy = s[S_BASE_LVEL + 1]
    vz = s[S_BASE_LVEL + 2]
    ox = s[S_BASE_AVEL]
    oy = s[S_BASE_AVEL + 1]
    oz = s[S_BASE_AVEL + 2]
    for k in range(4):
        q0 = s[S_Q + 3 * k]
        q1 = s[S_Q + 3 * k + 1]
        q2 = s[S_Q + 3 * k + 2]
        c0 = math.cos(q0)
        s0 = math.sin(q0)
        c1 = math.cos(q1)
        s1 = math.sin(q1)
        c12 = math.cos(q1 + q2)
        s12 = math.sin(q1 + q2)
        tx = model[M_THIGH + 3 * k]
        ty = model[M_THIGH + 3 * k + 1]
        tz = model[M_THIGH + 3 * k + 2]
        ux = model[M_SHANK + 3 * k]
        uy = model[M_SHANK + 3 * k + 1]
        uz = model[M_SHANK + 3 * k + 2]
        # thigh and shank vectors pitched about the rolled y axis
        ax = c1 * tx + s1 * tz
        ay = ty
        az = -s1 * tx + c1 * tz
        gx = c12 * ux + s12 * uz
        gy = uy
        gz = -s12 * ux + c12 * uz
        # chain after the hip roll, in the pre-roll leg frame
        px = model[M_HIP_OFFSET + 3 * k] + ax + gx
        py = model[M_HIP_OFFSET + 3 * k + 1] + ay + gy
        pz = model[M_HIP_OFFSET + 3 * k + 2] + az + gz
        hx = model[M_HIP + 3 * k]
        hy = model[M_HIP + 3 * k + 1]
        hz = model[M_HIP + 3 * k + 2]
        fx = hx + px
        fy = hy + c0 * py - s0 * pz
        fz = hz + s0 * py + c0 * pz
        work[W_FOOT_B + 3 * k] = fx
        work[W_FOOT_B + 3 * k + 1] = fy
        work[W_FOOT_B + 3 * k + 2] = fz
        # Jacobian columns: roll about x through the hip, then two pitches
        # about the rolled y axis e = (0, c0, s0) through their pivots.
        wx = fx - hx
        wy = fy - hy
        wz = fz - hz
        work[W_JAC + 9 * k + 0] = 0.0
        work[W_JAC + 9 * k + 3] = -wz
        work[W_JAC + 9 * k + 6] = wy
        # foot minus pitch pivots, expressed in the base frame
        abx = ax + gx
        aby = c0 * (ay + gy) - s0 * (az + gz)
        abz = s0 * (ay + gy) + c0 * (az + gz)
        work[W_JAC + 9 * k + 1] = c0 * abz - s0 * aby
        work[W_JAC + 9 * k + 4] = s0 * abx
        work[W_JAC + 9 * k + 7] = -c0 * abx
        gbx = gx
        gby = c0 * gy - s0 * gz
        gbz = s0 * gy + c0 * gz
        work[W_JAC + 9 * k + 2] = c0 * gbz - s0 * gby
        work[W_JAC + 9 * k + 5] = s0 * gbx
        work[W_JAC + 9 * k + 8] = -c0 * gbx
        # world position and velocity of the foot center
        rx = work[W_R + 0] * fx + work[W_R + 1] * fy + work[W_R + 2] * fz
        ry = work[W_R + 3] * fx + work[W_R + 4] * fy + work[W_R + 5] * fz
        rz = work[W_R + 6] * fx + work[W_R + 7] * fy + work[W_R + 8] * fz
        work[W_FOOT_W + 3 * k] = bx + rx
        work[W_FOOT_W + 3 * k + 1] = by + ry
        work[W_FOOT_W + 3 * k + 2] = bz + rz
        d0 = s[S_DQ + 3 * k]
        d1 = s[S_DQ + 3 * k + 1]
        d2 = s[S_DQ + 3 * k + 2]
        jx = work[W_JAC + 9 * k + 0] * d0 + work[W_JAC + 9 * k + 1] * d1 + work[W_JAC + 9 * k + 2] * d2
        jy = work[W_JAC + 9 * k + 3] * d0 + work[W_JAC + 9 * k + 4] * d1 + work[W_JAC + 9 * k + 5] * d2
        jz = work[W_JAC + 9 * k + 6] * d0 + work[W_JAC + 9 * k + 7] * d1 + work[W_JAC + 9 * k + 8] * d2
        work[W_FOOT_V + 3 * k] = vx + oy * rz - oz * ry + work[W_R + 0] * jx + work[W_R + 1] * jy + work[W_R + 2] * jz
        work[W_FOOT_V + 3 * k + 1] = vy + oz * rx - ox * rz + work[W_R + 3] * jx + work[W_R + 4] * jy + work[W_R + 5] * jz
        work[W_FOOT_V + 3 * k + 2] = vz + ox * ry - oy * rx + work[W_R + 6] * jx + work[W_R + 7] * jy + work[W_R + 8] * jz


def _point_vel(s, work, body, px, py, pz, out):
    """World velocity of `body` at world point p (foot: center velocity)."""
    if body == BODY_GROUND:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
    elif body == BODY_BASE:
        rx = px - s[S_BASE_POS]
        ry = py - s[S_BASE_POS + 1]
        rz = pz - s[S_BASE_POS + 2]
        out[0] = s[S_BASE_LVEL] + s[S_BASE_AVEL + 1] * rz - s[S_BASE_AVEL + 2] * ry
        out[1] = s[S_BASE_LVEL + 1] + s[S_BASE_AVEL + 2] * rx - s[S_BASE_AVEL] * rz
        out[2] = s[S_BASE_LVEL + 2] + s[S_BASE_AVEL] * ry - s[S_BASE_AVEL + 1] * rx
    elif body == BODY_BALL:
        rx = px - s[S_BALL_POS]
        ry = py - s[S_BALL_POS + 1]
        rz = pz - s[S_BALL_POS + 2]
        out[0] = s[S_BALL_LVEL] + s[S_BALL_AVEL + 1] * rz - s[S_BALL_AVEL + 2] * ry
        out[1] = s[S_BALL_LVEL + 1] + s[S_BALL_AVEL + 2] * rx - s[S_BALL_AVEL] * rz
        out[2] = s[S_BALL_LVEL + 2] + s[S_BALL_AVEL] * ry - s[S_BALL_AVEL + 1] * rx
    else:
        k = body - BODY_FOOT0
        out[0] = work[W_FOOT_V + 3 * k]
        out[1] = work[W_FOOT_V + 3 * k + 1]
        out[2] = work[W_FOOT_V + 3 * k + 2]


def _inv_mass(s, model, work, body, px, py, pz, nx, ny, nz):
    """Inverse effective mass of `body` along the unit normal at point p."""
    if body == BODY_GROUND:
        return 0.0
    if body == BODY_BALL:
        rx = px - s[S_BALL_POS]
        ry = py - s[S_BALL_POS + 1]
        rz = pz - s[S_BALL_POS + 2]
        cx = ry * nz - rz * ny
        cy = rz * nx - rx * nz
        cz = rx * ny - ry * nx
        return 1.0 / model[M_BALL_MASS] + (cx * cx + cy * cy + cz * cz) / model[M_BALL_INERTIA]
    # base terms are shared by the base itself and by foot contacts, which
    # transmit their wrench to the base through the massless leg
    if body == BODY_BASE:
        rx = px - s[S_BASE_POS]
        ry = py - s[S_BASE_POS + 1]
        rz = pz - s[S_BASE_POS + 2]
    else:
        k = body - BODY_FOOT0
        rx = work[W_FOOT_W + 3 * k] - s[S_BASE_POS]
        ry = work[W_FOOT_W + 3 * k + 1] - s[S_BASE_POS + 1]
        rz = work[W_FOOT_W + 3 * k + 2] - s[S_BASE_POS + 2]
    cx = ry * nz - rz * ny
    cy = rz * nx - rx * nz
    cz = rx * ny - ry * nx
    bx = work[W_R + 0] * cx + work[W_R + 3] * cy + work[W_R + 6] * cz
    by = work[W_R + 1] * cx + work[W_R + 4] * cy + work[W_R + 7] * cz
    bz = work[W_R + 2] * cx + work[W_R + 5] * cy + work[W_R + 8] * cz
    inv = (
        1.0 / model[M_BASE_MASS]
        + bx * bx / model[M_BASE_INERTIA]
        + by * by / model[M_BASE_INERTIA + 1]
        + bz * bz / model[M_BASE_INERTIA + 2]
    )
    if body != BODY_BASE:
        k = body - BODY_FOOT0
        mx = work[W_R + 0] * nx + work[W_R + 3] * ny + work[W_R + 6] * nz
        my = work[W_R + 1] * nx + work[W_R + 4] * ny + work[W_R + 7] * nz
        mz = work[W_R + 2] * nx + work[W_R + 5] * ny + work[W_R + 8] * nz
        for c in range(3):
            jn = (
                work[W_JAC + 9 * k + c] * mx
                + work[W_JAC + 9 * k + 3 + c] * my
                + work[W_JAC + 9 * k + 6 + c] * mz
            )
            inv += jn * jn / model[M_JOINT_INERTIA]
    return inv


def _apply_force(s, model, work, body, px, py, pz, fx, fy, fz):
    """Accumulate world force f acting on `body` at world point p."""
    if body == BODY_GROUND:
        return
    if body == BODY_BALL:
        rx = px - s[S_BALL_POS]
        ry = py - s[S_BALL_POS + 1]
        rz = pz - s[S_BALL_POS + 2]
        work[W_F_BALL] += fx
        work[W_F_BALL + 1] += fy
        work[W_F_BALL + 2] += fz
        work[W_T_BALL] += ry * fz - rz * fy
        work[W_T_BALL + 1] += rz * fx - rx * fz
        work[W_T_BALL + 2] += rx * fy - ry * fx
        return
    if body == BODY_BASE:
        rx = px - s[S_BASE_POS]
        ry = py - s[S_BASE_POS + 1]
        rz = pz - s[S_BASE_POS + 2]
    else:
        # foot: the wrench lands on the base at the foot center, and the
        # base-frame force maps into joint torques through the Jacobian
        k = body - BODY_FOOT0
        rx = work[W_FOOT_W + 3 * k] - s[S_BASE_POS]
        ry = work[W_FOOT_W + 3 * k + 1] - s[S_BASE_POS + 1]
        rz = work[W_FOOT_W + 3 * k + 2] - s[S_BASE_POS + 2]
        mx = work[W_R + 0] * fx + work[W_R + 3] * fy + work[W_R + 6] * fz
        my = work[W_R + 1] * fx + work[W_R + 4] * fy + work[W_R + 7] * fz
        mz = work[W_R + 2] * fx + work[W_R + 5] * fy + work[W_R + 8] * fz
        for c in range(3):
            work[W_TAU_C + 3 * k + c] += (
                work[W_JAC + 9 * k + c] * mx
                + work[W_JAC + 9 * k + 3 + c] * my
                + work[W_JAC + 9 * k + 6 + c] * mz
            )
    work[W_F_BASE] += fx
    work[W_F_BASE + 1] += fy
    work[W_F_BASE + 2] += fz
    work[W_T_BASE] += ry * fz - rz * fy
    work[W_T_BASE + 1] += rz * fx - rx * fz
    work[W_T_BASE + 2] += rx * fy - ry * fx


def _process_pair(
    s, model, work, rows, n, record, apply,
    a, b, px, py, pz, nx, ny, nz, pen, va, vb,
):
    _point_vel(s, work, a, px, py, pz, va)
    _point_vel(s, work, b, px, py, pz, vb)
    rvx = vb[0] - va[0]
    rvy = vb[1] - va[1]
    rvz = vb[2] - va[2]
    vn = rvx * nx + rvy * ny + rvz * nz
    vtx = rvx - vn * nx
    vty = rvy - vn * ny
    vtz = rvz - vn * nz
    fn = 0.0
    ftx = 0.0
    fty = 0.0
    ftz = 0.0
    if apply:
        dt = model[M_DT_SUB]
        stiff = model[M_CONTACT_STIFFNESS]
        # The spring acts on the penetration predicted for the end of this
        # substep. Under semi-implicit Euler the geometric penetration lags
        # the force by one substep, so a spring on the lagged value stores
        # energy it never paid for at contact onset; the predicted value
        # closes that gap (equivalent to adding k*dt of damping).
        v_pen = -vn
        pen_pred = pen + dt * v_pen
        if pen_pred > 0.0:
            inv_m = _inv_mass(s, model, work, a, px, py, pz, nx, ny, nz)
            inv_m += _inv_mass(s, model, work, b, px, py, pz, nx, ny, nz)
            if inv_m < 1e-12:
                inv_m = 1e-12
            m_eff = 1.0 / inv_m
            e = model[M_RESTITUTION]
            if e > 0.999999:
                zeta = 0.0
            else:
                if e < 1e-6:
                    e = 1e-6
                ln_e = math.log(e)
                zeta = -ln_e / math.sqrt(math.pi * math.pi + ln_e * ln_e)
            # restitution-matched damper, capped so the damping impulse can
            # never reverse the approach velocity within one substep
            d = 2.0 * zeta * math.sqrt(stiff * m_eff)
            if d > m_eff / dt:
                d = m_eff / dt
            fn = stiff * pen_pred + d * v_pen
            if fn < 0.0:
                fn = 0.0
            mu = model[M_FRICTION_MU]
            vt_norm = math.sqrt(vtx * vtx + vty * vty + vtz * vtz)
            if fn > 0.0 and mu > 0.0 and vt_norm > 1e-12:
                ft = mu * fn
                reg = mu * fn * vt_norm / model[M_FRICTION_VTOL]
                if reg < ft:
                    ft = reg
                stop = m_eff * vt_norm / dt
                if stop < ft:
                    ft = stop
                ftx = -ft * vtx / vt_norm
                fty = -ft * vty / vt_norm
                ftz = -ft * vtz / vt_norm
            if fn > 0.0:
                fx = fn * nx + ftx
                fy = fn * ny + fty
                fz = fn * nz + ftz
                _apply_force(s, model, work, b, px, py, pz, fx, fy, fz)
                _apply_force(s, model, work, a, px, py, pz, -fx, -fy, -fz)
    if record and pen > 0.0:
        rows[n, C_BODY_A] = a
        rows[n, C_BODY_B] = b
        rows[n, C_POS] = px
        rows[n, C_POS + 1] = py
        rows[n, C_POS + 2] = pz
        rows[n, C_NORMAL] = nx
        rows[n, C_NORMAL + 1] = ny
        rows[n, C_NORMAL + 2] = nz
        rows[n, C_PEN] = pen
        rows[n, C_VN] = vn
        rows[n, C_VT] = vtx
        rows[n, C_VT + 1] = vty
        rows[n, C_VT + 2] = vtz
        rows[n, C_FN] = fn
        rows[n, C_FT] = ftx
        rows[n, C_FT + 1] = fty
        rows[n, C_FT + 2] = ftz
        n += 1
    return n


def _sphere_box_gap(s, model, work, cx, cy, cz, radius, out):
    """Closest approach of a sphere to the base box.

    Writes [pen, px, py, pz, nx, ny, nz] with the normal pointing from the
    box toward the sphere; pen > 0 means overlap.
    """
    dx = cx - s[S_BASE_POS]
    dy = cy - s[S_BASE_POS + 1]
    dz = cz - s[S_BASE_POS + 2]
    lx = work[W_R + 0] * dx + work[W_R + 3] * dy + work[W_R + 6] * dz
    ly = work[W_R + 1] * dx + work[W_R + 4] * dy + work[W_R + 7] * dz
    lz = work[W_R + 2] * dx + work[W_R + 5] * dy + work[W_R + 8] * dz
    hx = model[M_BASE_HALF]
    hy = model[M_BASE_HALF + 1]
    hz = model[M_BASE_HALF + 2]
    qx = lx
    qy = ly
    qz = lz
    if qx < -hx:
        qx = -hx
    elif qx > hx:
        qx = hx
    if qy < -hy:
        qy = -hy
    elif qy > hy:
        qy = hy
    if qz < -hz:
        qz = -hz
    elif qz > hz:
        qz = hz
    gx = lx - qx
    gy = ly - qy
    gz = lz - qz
    dist = math.sqrt(gx * gx + gy * gy + gz * gz)
    if dist > 1e-12:
        pen = radius - dist
        nlx = gx / dist
        nly = gy / dist
        nlz = gz / dist
    else:
        # center inside the box: push out along the shallowest face
        best = hx - abs(lx)
        nlx = 1.0 if lx >= 0.0 else -1.0
        nly = 0.0
        nlz = 0.0
        if hy - abs(ly) < best:
            best = hy - abs(ly)
            nlx = 0.0
            nly = 1.0 if ly >= 0.0 else -1.0
            nlz = 0.0
        if hz - abs(lz) < best:
            best = hz - abs(lz)
            nlx = 0.0
            nly = 0.0
            nlz = 1.0 if lz >= 0.0 else -1.0
        pen = radius + best
        qx = lx
        qy = ly
        qz = lz
    out[0] = pen
    # surface point on the box, world frame
    out[1] = s[S_BASE_POS] + work[W_R + 0] * qx + work[W_R + 1] * qy + work[W_R + 2] * qz
    out[2] = s[S_BASE_POS + 1] + work[W_R + 3] * qx + work[W_R + 4] * qy + work[W_R + 5] * qz
    out[3] = s[S_BASE_POS + 2] + work[W_R + 6] * qx + work[W_R + 7] * qy + work[W_R + 8] * qz
    out[4] = work[W_R + 0] * nlx + work[W_R + 1] * nly + work[W_R + 2] * nlz
    out[5] = work[W_R + 3] * nlx + work[W_R + 4] * nly + work[W_R + 5] * nlz
    out[6] = work[W_R + 6] * nlx + work[W_R + 7] * nly + work[W_R + 8] * nlz


def _contact_pass(s, model, work, rows, record, extras, apply, va, vb, scratch):
    """Detect contacts and, when `apply`, accumulate their forces.

    Returns the number of rows written (0 unless `record`). Force-bearing
    pairs come first in a fixed order, then the detection-only pairs.
    """
    n = 0
    r_ball = model[M_BALL_RADIUS]
    r_foot = model[M_FOOT_RADIUS]

    # ball - ground
    pen = r_ball - s[S_BALL_POS + 2]
    if pen > -_PRED_SLACK:
        n = _process_pair(
            s, model, work, rows, n, record, apply,
            BODY_GROUND, BODY_BALL,
            s[S_BALL_POS], s[S_BALL_POS + 1], s[S_BALL_POS + 2] - r_ball,
            0.0, 0.0, 1.0, pen, va, vb,
        )

    # foot - ground
    for k in range(4):
        fz = work[W_FOOT_W + 3 * k + 2]
        pen = r_foot - fz
        if pen > -_PRED_SLACK:
            n = _process_pair(
                s, model, work, rows, n, record, apply,
                BODY_GROUND, BODY_FOOT0 + k,
                work[W_FOOT_W + 3 * k], work[W_FOOT_W + 3 * k + 1], fz - r_foot,
                0.0, 0.0, 1.0, pen, va, vb,
            )

    # foot - ball
    for k in range(4):
        dx = s[S_BALL_POS] - work[W_FOOT_W + 3 * k]
        dy = s[S_BALL_POS + 1] - work[W_FOOT_W + 3 * k + 1]
        dz = s[S_BALL_POS + 2] - work[W_FOOT_W + 3 * k + 2]
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        pen = r_ball + r_foot - dist
        if pen > -_PRED_SLACK and dist > 1e-12:
            nx = dx / dist
            ny = dy / dist
            nz = dz / dist
            off = r_foot - 0.5 * pen
            n = _process_pair(
                s, model, work, rows, n, record, apply,
                BODY_FOOT0 + k, BODY_BALL,
                work[W_FOOT_W + 3 * k] + nx * off,
                work[W_FOOT_W + 3 * k + 1] + ny * off,
                work[W_FOOT_W + 3 * k + 2] + nz * off,
                nx, ny, nz, pen, va, vb,
            )

    # base corners - ground
    for i in range(8):
        cx = -model[M_BASE_HALF] if i < 4 else model[M_BASE_HALF]
        cy = -model[M_BASE_HALF + 1] if i % 4 < 2 else model[M_BASE_HALF + 1]
        cz = -model[M_BASE_HALF + 2] if i % 2 == 0 else model[M_BASE_HALF + 2]
        wx = s[S_BASE_POS] + work[W_R + 0] * cx + work[W_R + 1] * cy + work[W_R + 2] * cz
        wy = s[S_BASE_POS + 1] + work[W_R + 3] * cx + work[W_R + 4] * cy + work[W_R + 5] * cz
        wz = s[S_BASE_POS + 2] + work[W_R + 6] * cx + work[W_R + 7] * cy + work[W_R + 8] * cz
        if wz < _PRED_SLACK:
            n = _process_pair(
                s, model, work, rows, n, record, apply,
                BODY_GROUND, BODY_BASE,
                wx, wy, wz, 0.0, 0.0, 1.0, -wz, va, vb,
            )

    if not extras:
        return n

    # detection-only pairs, evaluated for termination checks: no forces
    # ball - base
    _sphere_box_gap(
        s, model, work,
        s[S_BALL_POS], s[S_BALL_POS + 1], s[S_BALL_POS + 2], r_ball, scratch,
    )
    if scratch[0] > 0.0:
        n = _process_pair(
            s, model, work, rows, n, record, False,
            BODY_BASE, BODY_BALL,
            scratch[1], scratch[2], scratch[3],
            scratch[4], scratch[5], scratch[6], scratch[0], va, vb,
        )

    # foot - base
    for k in range(4):
        _sphere_box_gap(
            s, model, work,
            work[W_FOOT_W + 3 * k], work[W_FOOT_W + 3 * k + 1], work[W_FOOT_W + 3 * k + 2],
            r_foot, scratch,
        )
        if scratch[0] > 0.0:
            n = _process_pair(
                s, model, work, rows, n, record, False,
                BODY_BASE, BODY_FOOT0 + k,
                scratch[1], scratch[2], scratch[3],
                scratch[4], scratch[5], scratch[6], scratch[0], va, vb,
            )

    # foot - foot
    for i in range(4):
        for j in range(i + 1, 4):
            dx = work[W_FOOT_W + 3 * j] - work[W_FOOT_W + 3 * i]
            dy = work[W_FOOT_W + 3 * j + 1] - work[W_FOOT_W + 3 * i + 1]
            dz = work[W_FOOT_W + 3 * j + 2] - work[W_FOOT_W + 3 * i + 2]
            dist = math.sqrt(dx * dx + dy * dy + dz * dz)
            pen = 2.0 * r_foot - dist
            if pen > 0.0 and dist > 1e-12:
                nx = dx / dist
                ny = dy / dist
                nz = dz / dist
                off = r_foot - 0.5 * pen
                n = _process_pair(
                    s, model, work, rows, n, record, False,
                    BODY_FOOT0 + i, BODY_FOOT0 + j,
                    work[W_FOOT_W + 3 * i] + nx * off,
                    work[W_FOOT_W + 3 * i + 1] + ny * off,
                    work[W_FOOT_W + 3 * i + 2] + nz * off,
                    nx, ny, nz, pen, va, vb,
                )
    return n


def step(s_in, s_out, model, targets, ext_force, tau_mean, rows, work):
    """Advance one control step (n_sub substeps). Returns the number of
    contact rows recorded from the final substep, or -1 if the state went
    non-finite."""
    # A diverging state may overflow before the isfinite sweep flags it;
    # that is the kernel's own error path, not something to warn about.
    with np.errstate(over="ignore", invalid="ignore"):
        return _step_impl(s_in, s_out, model, targets, ext_force, tau_mean, rows, work)


def _step_impl(s_in, s_out, model, targets, ext_force, tau_mean, rows, work):
    for i in range(N_STATE):
        s_out[i] = s_in[i]
    s = s_out
    n_sub = int(model[M_N_SUB])
    dt = model[M_DT_SUB]
    g = model[M_GRAVITY]
    kp = model[M_KP]
    kd = model[M_KD]
    tau_max = model[M_TAU_MAX]
    inv_ji = 1.0 / model[M_JOINT_INERTIA]
    mb = model[M_BASE_MASS]
    mball = model[M_BALL_MASS]
    iball = model[M_BALL_INERTIA]
    va = [0.0, 0.0, 0.0]
    vb = [0.0, 0.0, 0.0]
    scratch = [0.0] * 7
    for j in range(12):
        tau_mean[j] = 0.0
    ncon = 0
    for sub in range(n_sub):
        last = sub == n_sub - 1
        for i in range(24):
            work[W_F_BASE + i] = 0.0
        _fk_pass(s, model, work)
        ncon = _contact_pass(
            s, model, work, rows, last, last, True, va, vb, scratch
        )
        # PD torques toward the commanded joint targets
        for j in range(12):
            tau = kp * (targets[j] - s[S_Q + j]) - kd * s[S_DQ + j]
            if tau > tau_max:
                tau = tau_max
            elif tau < -tau_max:
                tau = -tau_max
            tau_mean[j] += tau
            ddq = (tau + work[W_TAU_C + j]) * inv_ji
            s[S_DQ + j] += dt * ddq
        for j in range(12):
            s[S_Q + j] += dt * s[S_DQ + j]
            lo = model[M_Q_LO + j]
            hi = model[M_Q_HI + j]
            if s[S_Q + j] < lo:
                s[S_Q + j] = lo
                if s[S_DQ + j] < 0.0:
                    s[S_DQ + j] = 0.0
            elif s[S_Q + j] > hi:
                s[S_Q + j] = hi
                if s[S_DQ + j] > 0.0:
                    s[S_DQ + j] = 0.0

        # base: linear, then body-frame Euler equations for rotation
        s[S_BASE_LVEL] += dt * (work[W_F_BASE] / mb)
        s[S_BASE_LVEL + 1] += dt * (work[W_F_BASE + 1] / mb)
        s[S_BASE_LVEL + 2] += dt * (work[W_F_BASE + 2] / mb - g)
        obx = work[W_R + 0] * s[S_BASE_AVEL] + work[W_R + 3] * s[S_BASE_AVEL + 1] + work[W_R + 6] * s[S_BASE_AVEL + 2]
        oby = work[W_R + 1] * s[S_BASE_AVEL] + work[W_R + 4] * s[S_BASE_AVEL + 1] + work[W_R + 7] * s[S_BASE_AVEL + 2]
        obz = work[W_R + 2] * s[S_BASE_AVEL] + work[W_R + 5] * s[S_BASE_AVEL + 1] + work[W_R + 8] * s[S_BASE_AVEL + 2]
        tbx = work[W_R + 0] * work[W_T_BASE] + work[W_R + 3] * work[W_T_BASE + 1] + work[W_R + 6] * work[W_T_BASE + 2]
        tby = work[W_R + 1] * work[W_T_BASE] + work[W_R + 4] * work[W_T_BASE + 1] + work[W_R + 7] * work[W_T_BASE + 2]
        tbz = work[W_R + 2] * work[W_T_BASE] + work[W_R + 5] * work[W_T_BASE + 1] + work[W_R + 8] * work[W_T_BASE + 2]
        # The gyroscopic term omega x (I omega) is omitted: the base stays
        # nearly flat in this task, and without the term a torque-free
        # rotation conserves energy exactly under this discretization, which
        # the dissipativity audit relies on.
        obx += dt * (tbx / model[M_BASE_INERTIA])
        oby += dt * (tby / model[M_BASE_INERTIA + 1])
        obz += dt * (tbz / model[M_BASE_INERTIA + 2])
        s[S_BASE_AVEL] = work[W_R + 0] * obx + work[W_R + 1] * oby + work[W_R + 2] * obz
        s[S_BASE_AVEL + 1] = work[W_R + 3] * obx + work[W_R + 4] * oby + work[W_R + 5] * obz
        s[S_BASE_AVEL + 2] = work[W_R + 6] * obx + work[W_R + 7] * oby + work[W_R + 8] * obz
        s[S_BASE_POS] += dt * s[S_BASE_LVEL]
        s[S_BASE_POS + 1] += dt * s[S_BASE_LVEL + 1]
        s[S_BASE_POS + 2] += dt * s[S_BASE_LVEL + 2]
        _integrate_quat(s, S_BASE_QUAT, s[S_BASE_AVEL], s[S_BASE_AVEL + 1], s[S_BASE_AVEL + 2], dt)

        # ball: disturbance force acts at the center of mass
        s[S_BALL_LVEL] += dt * ((work[W_F_BALL] + ext_force[0]) / mball)
        s[S_BALL_LVEL + 1] += dt * ((work[W_F_BALL + 1] + ext_force[1]) / mball)
        s[S_BALL_LVEL + 2] += dt * ((work[W_F_BALL + 2] + ext_force[2]) / mball - g)
        s[S_BALL_AVEL] += dt * (work[W_T_BALL] / iball)
        s[S_BALL_AVEL + 1] += dt * (work[W_T_BALL + 1] / iball)
        s[S_BALL_AVEL + 2] += dt * (work[W_T_BALL + 2] / iball)
        s[S_BALL_POS] += dt * s[S_BALL_LVEL]
        s[S_BALL_POS + 1] += dt * s[S_BALL_LVEL + 1]
        s[S_BALL_POS + 2] += dt * s[S_BALL_LVEL + 2]
        _integrate_quat(s, S_BALL_QUAT, s[S_BALL_AVEL], s[S_BALL_AVEL + 1], s[S_BALL_AVEL + 2], dt)

    for j in range(12):
        tau_mean[j] /= n_sub
    for i in range(N_STATE):
        if not math.isfinite(s[i]):
            return -1
    return ncon


def detect(s, model, rows, work):
    """Contact detection for all pairs at the given state.

    Force columns are computed exactly as a substep would (so rows can be
    inspected and tested), but nothing is applied: the accumulators live in
    the scratch buffer and the state is never integrated.
    """
    va = [0.0, 0.0, 0.0]
    vb = [0.0, 0.0, 0.0]
    scratch = [0.0] * 7
    for i in range(24):
        work[W_F_BASE + i] = 0.0
    _fk_pass(s, model, work)
    return _contact_pass(s, model, work, rows, True, True, True, va, vb, scratch)


def fk_world(s, model, feet_out, work):
    """Foot center world positions into feet_out (12,)."""
    _fk_pass(s, model, work)
    for i in range(12):
        feet_out[i] = work[W_FOOT_W + i]
