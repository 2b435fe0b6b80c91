# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled physics kernel.

Statement-for-statement mirror of _kernel_py.py; every floating-point
expression appears in the same order so both backends produce bit-identical
trajectories (the extension is built with FP contraction disabled). Edit the
Python kernel first, then mirror changes here; _check_layout() guards the
offsets at import time.
"""

from libc.math cimport cos, fabs, isfinite, log, sin, sqrt, M_PI

from . import _layout as _L

cdef enum:
    S_BASE_POS = 0
    S_BASE_QUAT = 3
    S_BASE_LVEL = 7
    S_BASE_AVEL = 10
    S_Q = 13
    S_DQ = 25
    S_BALL_POS = 37
    S_BALL_QUAT = 40
    S_BALL_LVEL = 44
    S_BALL_AVEL = 47
    N_STATE = 50

    M_DT_SUB = 0
    M_N_SUB = 1
    M_GRAVITY = 2
    M_BASE_MASS = 3
    M_BASE_INERTIA = 4
    M_BASE_HALF = 7
    M_BALL_MASS = 10
    M_BALL_RADIUS = 11
    M_BALL_INERTIA = 12
    M_CONTACT_STIFFNESS = 13
    M_FRICTION_MU = 14
    M_RESTITUTION = 15
    M_FRICTION_VTOL = 16
    M_KP = 17
    M_KD = 18
    M_TAU_MAX = 19
    M_JOINT_INERTIA = 20
    M_FOOT_RADIUS = 21
    M_HIP = 22
    M_HIP_OFFSET = 34
    M_THIGH = 46
    M_SHANK = 58
    M_Q_LO = 70
    M_Q_HI = 82

    BODY_GROUND = 0
    BODY_BASE = 1
    BODY_FOOT0 = 2
    BODY_BALL = 6

    C_BODY_A = 0
    C_BODY_B = 1
    C_POS = 2
    C_NORMAL = 5
    C_PEN = 8
    C_VN = 9
    C_VT = 10
    C_FN = 13
    C_FT = 14

    W_R = 0
    W_FOOT_B = 9
    W_FOOT_W = 21
    W_FOOT_V = 33
    W_JAC = 45
    W_F_BASE = 81
    W_T_BASE = 84
    W_F_BALL = 87
    W_T_BALL = 90
    W_TAU_C = 93

cdef double _SMALL_ANGLE = 1e-8
cdef double _PRED_SLACK = 0.05


def _check_layout():
    pairs = [
        (S_BASE_POS, _L.S_BASE_POS), (S_BASE_QUAT, _L.S_BASE_QUAT),
        (S_BASE_LVEL, _L.S_BASE_LVEL), (S_BASE_AVEL, _L.S_BASE_AVEL),
        (S_Q, _L.S_Q), (S_DQ, _L.S_DQ), (S_BALL_POS, _L.S_BALL_POS),
        (S_BALL_QUAT, _L.S_BALL_QUAT), (S_BALL_LVEL, _L.S_BALL_LVEL),
        (S_BALL_AVEL, _L.S_BALL_AVEL), (N_STATE, _L.N_STATE),
        (M_DT_SUB, _L.M_DT_SUB), (M_N_SUB, _L.M_N_SUB),
        (M_GRAVITY, _L.M_GRAVITY), (M_BASE_MASS, _L.M_BASE_MASS),
        (M_BASE_INERTIA, _L.M_BASE_INERTIA), (M_BASE_HALF, _L.M_BASE_HALF),
        (M_BALL_MASS, _L.M_BALL_MASS), (M_BALL_RADIUS, _L.M_BALL_RADIUS),
        (M_BALL_INERTIA, _L.M_BALL_INERTIA),
        (M_CONTACT_STIFFNESS, _L.M_CONTACT_STIFFNESS),
        (M_FRICTION_MU, _L.M_FRICTION_MU), (M_RESTITUTION, _L.M_RESTITUTION),
        (M_FRICTION_VTOL, _L.M_FRICTION_VTOL), (M_KP, _L.M_KP),
        (M_KD, _L.M_KD), (M_TAU_MAX, _L.M_TAU_MAX),
        (M_JOINT_INERTIA, _L.M_JOINT_INERTIA), (M_FOOT_RADIUS, _L.M_FOOT_RADIUS),
        (M_HIP, _L.M_HIP), (M_HIP_OFFSET, _L.M_HIP_OFFSET),
        (M_THIGH, _L.M_THIGH), (M_SHANK, _L.M_SHANK),
        (M_Q_LO, _L.M_Q_LO), (M_Q_HI, _L.M_Q_HI),
        (BODY_GROUND, _L.BODY_GROUND), (BODY_BASE, _L.BODY_BASE),
        (BODY_FOOT0, _L.BODY_FOOT0), (BODY_BALL, _L.BODY_BALL),
        (C_BODY_A, _L.C_BODY_A), (C_BODY_B, _L.C_BODY_B), (C_POS, _L.C_POS),
        (C_NORMAL, _L.C_NORMAL), (C_PEN, _L.C_PEN), (C_VN, _L.C_VN),
        (C_VT, _L.C_VT), (C_FN, _L.C_FN), (C_FT, _L.C_FT),
    ]
    for got, want in pairs:
        if got != want:
            raise ImportError("compiled kernel layout is out of date; rebuild")


_check_layout()


cdef void _quat_to_mat(double w, double x, double y, double z, double* R, int o) noexcept nogil:
    R[o + 0] = 1.0 - 2.0 * (y * y + z * z)
    R[o + 1] = 2.0 * (x * y - w * z)
    R[o + 2] = 2.0 * (x * z + w * y)
    R[o + 3] = 2.0 * (x * y + w * z)
    R[o + 4] = 1.0 - 2.0 * (x * x + z * z)
    R[o + 5] = 2.0 * (y * z - w * x)
    R[o + 6] = 2.0 * (x * z - w * y)
    R[o + 7] = 2.0 * (y * z + w * x)
    R[o + 8] = 1.0 - 2.0 * (x * x + y * y)


cdef void _integrate_quat(double* s, int qo, double wx, double wy, double wz, double dt) noexcept nogil:
    cdef double rx, ry, rz, angle, half, scale, dw, dx, dy, dz
    cdef double qw, qx, qy, qz, nw, nx, ny, nz, inv
    rx = wx * dt
    ry = wy * dt
    rz = wz * dt
    angle = sqrt(rx * rx + ry * ry + rz * rz)
    half = 0.5 * angle
    if angle < _SMALL_ANGLE:
        scale = 0.5 - angle * angle / 48.0
    else:
        scale = sin(half) / angle
    dw = cos(half)
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
    inv = 1.0 / sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    if nw < 0.0:
        inv = -inv
    s[qo] = nw * inv
    s[qo + 1] = nx * inv
    s[qo + 2] = ny * inv
    s[qo + 3] = nz * inv


cdef void _fk_pass(double* s, double* model, double* work) noexcept nogil:
    cdef double bx, by, bz, vx, vy, vz, ox, oy, oz
    cdef double q0, q1, q2, c0, s0, c1, s1, c12, s12
    cdef double tx, ty, tz, ux, uy, uz, ax, ay, az, gx, gy, gz
    cdef double px, py, pz, hx, hy, hz, fx, fy, fz, wx, wy, wz
    cdef double abx, aby, abz, gbx, gby, gbz, rx, ry, rz
    cdef double d0, d1, d2, jx, jy, jz
    cdef int k
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
        c0 = cos(q0)
        s0 = sin(q0)
        c1 = cos(q1)
        s1 = sin(q1)
        c12 = cos(q1 + q2)
        s12 = sin(q1 + q2)
        tx = model[M_THIGH + 3 * k]
        ty = model[M_THIGH + 3 * k + 1]
        tz = model[M_THIGH + 3 * k + 2]
        ux = model[M_SHANK + 3 * k]
        uy = model[M_SHANK + 3 * k + 1]
        uz = model[M_SHANK + 3 * k + 2]
        ax = c1 * tx + s1 * tz
        ay = ty
        az = -s1 * tx + c1 * tz
        gx = c12 * ux + s12 * uz
        gy = uy
        gz = -s12 * ux + c12 * uz
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
        wx = fx - hx
        wy = fy - hy
        wz = fz - hz
        work[W_JAC + 9 * k + 0] = 0.0
        work[W_JAC + 9 * k + 3] = -wz
        work[W_JAC + 9 * k + 6] = wy
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


cdef void _point_vel(double* s, double* work, int body, double px, double py, double pz, double* out) noexcept nogil:
    cdef double rx, ry, rz
    cdef int k
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


cdef double _inv_mass(double* s, double* model, double* work, int body,
                      double px, double py, double pz,
                      double nx, double ny, double nz) noexcept nogil:
    cdef double rx, ry, rz, cx, cy, cz, bx, by, bz, inv, mx, my, mz, jn
    cdef int k, c
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


cdef void _apply_force(double* s, double* model, double* work, int body,
                       double px, double py, double pz,
                       double fx, double fy, double fz) noexcept nogil:
    cdef double rx, ry, rz, mx, my, mz
    cdef int k, c
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


cdef int _process_pair(double* s, double* model, double* work, double* rows, int stride,
                       int n, bint record, bint apply_f,
                       int a, int b, double px, double py, double pz,
                       double nx, double ny, double nz, double pen,
                       double* va, double* vb) noexcept nogil:
    cdef double rvx, rvy, rvz, vn, vtx, vty, vtz
    cdef double fn, ftx, fty, ftz, dt, stiff, v_pen, pen_pred
    cdef double inv_m, m_eff, e, ln_e, zeta, d, mu, vt_norm, ft, reg, stop
    cdef double fx, fy, fz
    cdef double* row
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
    if apply_f:
        dt = model[M_DT_SUB]
        stiff = model[M_CONTACT_STIFFNESS]
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
                ln_e = log(e)
                zeta = -ln_e / sqrt(M_PI * M_PI + ln_e * ln_e)
            d = 2.0 * zeta * sqrt(stiff * m_eff)
            if d > m_eff / dt:
                d = m_eff / dt
            fn = stiff * pen_pred + d * v_pen
            if fn < 0.0:
                fn = 0.0
            mu = model[M_FRICTION_MU]
            vt_norm = sqrt(vtx * vtx + vty * vty + vtz * vtz)
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
        row = rows + n * stride
        row[C_BODY_A] = a
        row[C_BODY_B] = b
        row[C_POS] = px
        row[C_POS + 1] = py
        row[C_POS + 2] = pz
        row[C_NORMAL] = nx
        row[C_NORMAL + 1] = ny
        row[C_NORMAL + 2] = nz
        row[C_PEN] = pen
        row[C_VN] = vn
        row[C_VT] = vtx
        row[C_VT + 1] = vty
        row[C_VT + 2] = vtz
        row[C_FN] = fn
        row[C_FT] = ftx
        row[C_FT + 1] = fty
        row[C_FT + 2] = ftz
        n += 1
    return n


cdef void _sphere_box_gap(double* s, double* model, double* work,
                          double cx, double cy, double cz, double radius,
                          double* out) noexcept nogil:
    cdef double dx, dy, dz, lx, ly, lz, hx, hy, hz
    cdef double qx, qy, qz, gx, gy, gz, dist, pen, nlx, nly, nlz, best
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
    dist = sqrt(gx * gx + gy * gy + gz * gz)
    if dist > 1e-12:
        pen = radius - dist
        nlx = gx / dist
        nly = gy / dist
        nlz = gz / dist
    else:
        best = hx - fabs(lx)
        nlx = 1.0 if lx >= 0.0 else -1.0
        nly = 0.0
        nlz = 0.0
        if hy - fabs(ly) < best:
            best = hy - fabs(ly)
            nlx = 0.0
            nly = 1.0 if ly >= 0.0 else -1.0
            nlz = 0.0
        if hz - fabs(lz) < best:
            best = hz - fabs(lz)
            nlx = 0.0
            nly = 0.0
            nlz = 1.0 if lz >= 0.0 else -1.0
        pen = radius + best
        qx = lx
        qy = ly
        qz = lz
    out[0] = pen
    out[1] = s[S_BASE_POS] + work[W_R + 0] * qx + work[W_R + 1] * qy + work[W_R + 2] * qz
    out[2] = s[S_BASE_POS + 1] + work[W_R + 3] * qx + work[W_R + 4] * qy + work[W_R + 5] * qz
    out[3] = s[S_BASE_POS + 2] + work[W_R + 6] * qx + work[W_R + 7] * qy + work[W_R + 8] * qz
    out[4] = work[W_R + 0] * nlx + work[W_R + 1] * nly + work[W_R + 2] * nlz
    out[5] = work[W_R + 3] * nlx + work[W_R + 4] * nly + work[W_R + 5] * nlz
    out[6] = work[W_R + 6] * nlx + work[W_R + 7] * nly + work[W_R + 8] * nlz


cdef int _contact_pass(double* s, double* model, double* work, double* rows, int stride,
                       bint record, bint extras, bint apply_f,
                       double* va, double* vb, double* scratch) noexcept nogil:
    cdef int n = 0
    cdef double r_ball = model[M_BALL_RADIUS]
    cdef double r_foot = model[M_FOOT_RADIUS]
    cdef double pen, fz, dx, dy, dz, dist, nx, ny, nz, off
    cdef double cx, cy, cz, wx, wy, wz
    cdef int k, i, j

    pen = r_ball - s[S_BALL_POS + 2]
    if pen > -_PRED_SLACK:
        n = _process_pair(
            s, model, work, rows, stride, n, record, apply_f,
            BODY_GROUND, BODY_BALL,
            s[S_BALL_POS], s[S_BALL_POS + 1], s[S_BALL_POS + 2] - r_ball,
            0.0, 0.0, 1.0, pen, va, vb,
        )

    for k in range(4):
        fz = work[W_FOOT_W + 3 * k + 2]
        pen = r_foot - fz
        if pen > -_PRED_SLACK:
            n = _process_pair(
                s, model, work, rows, stride, n, record, apply_f,
                BODY_GROUND, BODY_FOOT0 + k,
                work[W_FOOT_W + 3 * k], work[W_FOOT_W + 3 * k + 1], fz - r_foot,
                0.0, 0.0, 1.0, pen, va, vb,
            )

    for k in range(4):
        dx = s[S_BALL_POS] - work[W_FOOT_W + 3 * k]
        dy = s[S_BALL_POS + 1] - work[W_FOOT_W + 3 * k + 1]
        dz = s[S_BALL_POS + 2] - work[W_FOOT_W + 3 * k + 2]
        dist = sqrt(dx * dx + dy * dy + dz * dz)
        pen = r_ball + r_foot - dist
        if pen > -_PRED_SLACK and dist > 1e-12:
            nx = dx / dist
            ny = dy / dist
            nz = dz / dist
            off = r_foot - 0.5 * pen
            n = _process_pair(
                s, model, work, rows, stride, n, record, apply_f,
                BODY_FOOT0 + k, BODY_BALL,
                work[W_FOOT_W + 3 * k] + nx * off,
                work[W_FOOT_W + 3 * k + 1] + ny * off,
                work[W_FOOT_W + 3 * k + 2] + nz * off,
                nx, ny, nz, pen, va, vb,
            )

    for i in range(8):
        cx = -model[M_BASE_HALF] if i < 4 else model[M_BASE_HALF]
        cy = -model[M_BASE_HALF + 1] if i % 4 < 2 else model[M_BASE_HALF + 1]
        cz = -model[M_BASE_HALF + 2] if i % 2 == 0 else model[M_BASE_HALF + 2]
        wx = s[S_BASE_POS] + work[W_R + 0] * cx + work[W_R + 1] * cy + work[W_R + 2] * cz
        wy = s[S_BASE_POS + 1] + work[W_R + 3] * cx + work[W_R + 4] * cy + work[W_R + 5] * cz
        wz = s[S_BASE_POS + 2] + work[W_R + 6] * cx + work[W_R + 7] * cy + work[W_R + 8] * cz
        if wz < _PRED_SLACK:
            n = _process_pair(
                s, model, work, rows, stride, n, record, apply_f,
                BODY_GROUND, BODY_BASE,
                wx, wy, wz, 0.0, 0.0, 1.0, -wz, va, vb,
            )

    if not extras:
        return n

    _sphere_box_gap(
        s, model, work,
        s[S_BALL_POS], s[S_BALL_POS + 1], s[S_BALL_POS + 2], r_ball, scratch,
    )
    if scratch[0] > 0.0:
        n = _process_pair(
            s, model, work, rows, stride, n, record, False,
            BODY_BASE, BODY_BALL,
            scratch[1], scratch[2], scratch[3],
            scratch[4], scratch[5], scratch[6], scratch[0], va, vb,
        )

    for k in range(4):
        _sphere_box_gap(
            s, model, work,
            work[W_FOOT_W + 3 * k], work[W_FOOT_W + 3 * k + 1], work[W_FOOT_W + 3 * k + 2],
            r_foot, scratch,
        )
        if scratch[0] > 0.0:
            n = _process_pair(
                s, model, work, rows, stride, n, record, False,
                BODY_BASE, BODY_FOOT0 + k,
                scratch[1], scratch[2], scratch[3],
                scratch[4], scratch[5], scratch[6], scratch[0], va, vb,
            )

    for i in range(4):
        for j in range(i + 1, 4):
            dx = work[W_FOOT_W + 3 * j] - work[W_FOOT_W + 3 * i]
            dy = work[W_FOOT_W + 3 * j + 1] - work[W_FOOT_W + 3 * i + 1]
            dz = work[W_FOOT_W + 3 * j + 2] - work[W_FOOT_W + 3 * i + 2]
            dist = sqrt(dx * dx + dy * dy + dz * dz)
            pen = 2.0 * r_foot - dist
            if pen > 0.0 and dist > 1e-12:
                nx = dx / dist
                ny = dy / dist
                nz = dz / dist
                off = r_foot - 0.5 * pen
                n = _process_pair(
                    s, model, work, rows, stride, n, record, False,
                    BODY_FOOT0 + i, BODY_FOOT0 + j,
                    work[W_FOOT_W + 3 * i] + nx * off,
                    work[W_FOOT_W + 3 * i + 1] + ny * off,
                    work[W_FOOT_W + 3 * i + 2] + nz * off,
                    nx, ny, nz, pen, va, vb,
                )
    return n


def step(double[::1] s_in, double[::1] s_out, double[::1] model,
         double[::1] targets, double[::1] ext_force, double[::1] tau_mean,
         double[:, ::1] rows, double[::1] work):
    """Advance one control step; mirrors _kernel_py.step."""
    cdef int ret
    with nogil:
        ret = _step_impl(&s_in[0], &s_out[0], &model[0], &targets[0],
                         &ext_force[0], &tau_mean[0], &rows[0, 0],
                         rows.shape[1], &work[0])
    return ret


cdef int _step_impl(double* s_in, double* s_out, double* mp, double* targets,
                    double* ext_force, double* tau_mean, double* rp,
                    int stride, double* wp) noexcept nogil:
    cdef double* s
    cdef int n_sub, i, j, sub, ncon
    cdef bint last
    cdef double dt, g, kp, kd, tau_max, inv_ji, mb, mball, iball
    cdef double tau, ddq, lo, hi
    cdef double obx, oby, obz, tbx, tby, tbz
    cdef double va[3]
    cdef double vb[3]
    cdef double scratch[7]
    for i in range(N_STATE):
        s_out[i] = s_in[i]
    s = s_out
    n_sub = <int> mp[M_N_SUB]
    dt = mp[M_DT_SUB]
    g = mp[M_GRAVITY]
    kp = mp[M_KP]
    kd = mp[M_KD]
    tau_max = mp[M_TAU_MAX]
    inv_ji = 1.0 / mp[M_JOINT_INERTIA]
    mb = mp[M_BASE_MASS]
    mball = mp[M_BALL_MASS]
    iball = mp[M_BALL_INERTIA]
    for j in range(12):
        tau_mean[j] = 0.0
    ncon = 0
    for sub in range(n_sub):
        last = sub == n_sub - 1
        for i in range(24):
            wp[W_F_BASE + i] = 0.0
        _fk_pass(s, mp, wp)
        ncon = _contact_pass(
            s, mp, wp, rp, stride, last, last, True, va, vb, scratch
        )
        for j in range(12):
            tau = kp * (targets[j] - s[S_Q + j]) - kd * s[S_DQ + j]
            if tau > tau_max:
                tau = tau_max
            elif tau < -tau_max:
                tau = -tau_max
            tau_mean[j] += tau
            ddq = (tau + wp[W_TAU_C + j]) * inv_ji
            s[S_DQ + j] += dt * ddq
        for j in range(12):
            s[S_Q + j] += dt * s[S_DQ + j]
            lo = mp[M_Q_LO + j]
            hi = mp[M_Q_HI + j]
            if s[S_Q + j] < lo:
                s[S_Q + j] = lo
                if s[S_DQ + j] < 0.0:
                    s[S_DQ + j] = 0.0
            elif s[S_Q + j] > hi:
                s[S_Q + j] = hi
                if s[S_DQ + j] > 0.0:
                    s[S_DQ + j] = 0.0

        s[S_BASE_LVEL] += dt * (wp[W_F_BASE] / mb)
        s[S_BASE_LVEL + 1] += dt * (wp[W_F_BASE + 1] / mb)
        s[S_BASE_LVEL + 2] += dt * (wp[W_F_BASE + 2] / mb - g)
        obx = wp[W_R + 0] * s[S_BASE_AVEL] + wp[W_R + 3] * s[S_BASE_AVEL + 1] + wp[W_R + 6] * s[S_BASE_AVEL + 2]
        oby = wp[W_R + 1] * s[S_BASE_AVEL] + wp[W_R + 4] * s[S_BASE_AVEL + 1] + wp[W_R + 7] * s[S_BASE_AVEL + 2]
        obz = wp[W_R + 2] * s[S_BASE_AVEL] + wp[W_R + 5] * s[S_BASE_AVEL + 1] + wp[W_R + 8] * s[S_BASE_AVEL + 2]
        tbx = wp[W_R + 0] * wp[W_T_BASE] + wp[W_R + 3] * wp[W_T_BASE + 1] + wp[W_R + 6] * wp[W_T_BASE + 2]
        tby = wp[W_R + 1] * wp[W_T_BASE] + wp[W_R + 4] * wp[W_T_BASE + 1] + wp[W_R + 7] * wp[W_T_BASE + 2]
        tbz = wp[W_R + 2] * wp[W_T_BASE] + wp[W_R + 5] * wp[W_T_BASE + 1] + wp[W_R + 8] * wp[W_T_BASE + 2]
        obx += dt * (tbx / mp[M_BASE_INERTIA])
        oby += dt * (tby / mp[M_BASE_INERTIA + 1])
        obz += dt * (tbz / mp[M_BASE_INERTIA + 2])
        s[S_BASE_AVEL] = wp[W_R + 0] * obx + wp[W_R + 1] * oby + wp[W_R + 2] * obz
        s[S_BASE_AVEL + 1] = wp[W_R + 3] * obx + wp[W_R + 4] * oby + wp[W_R + 5] * obz
        s[S_BASE_AVEL + 2] = wp[W_R + 6] * obx + wp[W_R + 7] * oby + wp[W_R + 8] * obz
        s[S_BASE_POS] += dt * s[S_BASE_LVEL]
        s[S_BASE_POS + 1] += dt * s[S_BASE_LVEL + 1]
        s[S_BASE_POS + 2] += dt * s[S_BASE_LVEL + 2]
        _integrate_quat(s, S_BASE_QUAT, s[S_BASE_AVEL], s[S_BASE_AVEL + 1], s[S_BASE_AVEL + 2], dt)

        s[S_BALL_LVEL] += dt * ((wp[W_F_BALL] + ext_force[0]) / mball)
        s[S_BALL_LVEL + 1] += dt * ((wp[W_F_BALL + 1] + ext_force[1]) / mball)
        s[S_BALL_LVEL + 2] += dt * ((wp[W_F_BALL + 2] + ext_force[2]) / mball - g)
        s[S_BALL_AVEL] += dt * (wp[W_T_BALL] / iball)
        s[S_BALL_AVEL + 1] += dt * (wp[W_T_BALL + 1] / iball)
        s[S_BALL_AVEL + 2] += dt * (wp[W_T_BALL + 2] / iball)
        s[S_BALL_POS] += dt * s[S_BALL_LVEL]
        s[S_BALL_POS + 1] += dt * s[S_BALL_LVEL + 1]
        s[S_BALL_POS + 2] += dt * s[S_BALL_LVEL + 2]
        _integrate_quat(s, S_BALL_QUAT, s[S_BALL_AVEL], s[S_BALL_AVEL + 1], s[S_BALL_AVEL + 2], dt)

    for j in range(12):
        tau_mean[j] /= n_sub
    for i in range(N_STATE):
        if not isfinite(s[i]):
            return -1
    return ncon


def detect(double[::1] s, double[::1] model, double[:, ::1] rows, double[::1] work):
    """Contact detection; mirrors _kernel_py.detect."""
    cdef double va[3]
    cdef double vb[3]
    cdef double scratch[7]
    cdef int i
    cdef double* wp = &work[0]
    for i in range(24):
        wp[W_F_BASE + i] = 0.0
    _fk_pass(&s[0], &model[0], wp)
    return _contact_pass(&s[0], &model[0], wp, &rows[0, 0], rows.shape[1],
                         True, True, True, va, vb, scratch)


def fk_world(double[::1] s, double[::1] model, double[::1] feet_out, double[::1] work):
    """Foot center world positions; mirrors _kernel_py.fk_world."""
    cdef int i
    _fk_pass(&s[0], &model[0], &work[0])
    for i in range(12):
        feet_out[i] = work[W_FOOT_W + i]
