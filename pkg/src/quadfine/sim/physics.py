"""Compiled rigid-body dynamics for the planar quadruped.

The robot is nine rods (torso + 4 x thigh + 4 x calf) in a vertical plane
with generalized coordinates q = [x, z, pitch, q0 .. q7].  The equations of
motion are assembled body by body,

    M(q) = sum_b  m_b Jv_b^T Jv_b  +  I_b Jw_b^T Jw_b,

with analytic center-of-mass Jacobians.  The angular Jacobians are constant
(planar mechanism), so the velocity-product terms reduce to the linear
accelerations each body's COM would have at zero joint acceleration:

    a_bias,b = -pitchdot^2 * R r_hip  -  sum_segments  L alphadot^2 d(alpha),

where d(alpha) = (sin alpha, -cos alpha) is the downward segment direction
and alpha chains pitch + hip (+ knee).  Ground contact is a vertical
spring-damper plus velocity-regularized Coulomb friction applied at ten
points: the four feet, the four knees, and the two torso ends.

Integration is semi-implicit Euler at the substep rate with the contact
dampers handled implicitly: the spring part of each active contact enters
the right-hand side explicitly, while the damping matrix D = diag(ct, dn)
is folded into the velocity solve,

    (M + h sum J^T D J) v+  =  M v + h (Q + sum J^T f_spring),

so stiff friction regularization stays stable against the very light foot
links (effective mass < 0.1 kg) at millisecond substeps.  After the solve,
separating contacts (negative normal force) are dropped and tangential
forces beyond the friction cone are clamped to mu * f_n, with one re-solve
when any clamp fires.

Everything here is numba-compiled and works on plain float64 arrays; the
packing of model parameters into those arrays lives in model.py.
"""

from __future__ import annotations

import numpy as np
from numba import njit

N_Q = 11
N_LEGS = 4
N_JOINTS = 8
N_CONTACTS = 10  # 0..3 feet, 4..7 knees, 8..9 torso ends
FOOT, KNEE, TORSO_END = 0, 4, 8


@njit(cache=True)
def contact_point_positions(q, geom):
    """World positions of the ten contact points, shape (10, 2)."""
    hb, lt, lc = geom[0], geom[1], geom[2]
    x, z, th = q[0], q[1], q[2]
    c, s = np.cos(th), np.sin(th)
    out = np.empty((N_CONTACTS, 2))
    for leg in range(N_LEGS):
        sgn = 1.0 if leg < 2 else -1.0
        hx = x + sgn * hb * c
        hz = z + sgn * hb * s
        a1 = th + q[3 + 2 * leg]
        a2 = a1 + q[4 + 2 * leg]
        kx = hx + lt * np.sin(a1)
        kz = hz - lt * np.cos(a1)
        out[KNEE + leg, 0] = kx
        out[KNEE + leg, 1] = kz
        out[FOOT + leg, 0] = kx + lc * np.sin(a2)
        out[FOOT + leg, 1] = kz - lc * np.cos(a2)
    out[TORSO_END, 0] = x + hb * c
    out[TORSO_END, 1] = z + hb * s
    out[TORSO_END + 1, 0] = x - hb * c
    out[TORSO_END + 1, 1] = z - hb * s
    return out


@njit(cache=True)
def _point_jacobian(q, geom, pid, J):
    """Fill J (2, 11) with the world-velocity Jacobian of contact point pid."""
    hb, lt, lc = geom[0], geom[1], geom[2]
    th = q[2]
    for i in range(2):
        for j in range(N_Q):
            J[i, j] = 0.0
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    if pid >= TORSO_END:
        sgn = 1.0 if pid == TORSO_END else -1.0
        J[0, 2] = -sgn * hb * np.sin(th)
        J[1, 2] = sgn * hb * np.cos(th)
        return
    leg = pid % N_LEGS
    sgn = 1.0 if leg < 2 else -1.0
    a1 = th + q[3 + 2 * leg]
    d1x, d1z = np.cos(a1), np.sin(a1)
    jx = -sgn * hb * np.sin(th) + lt * d1x
    jz = sgn * hb * np.cos(th) + lt * d1z
    if pid >= KNEE:
        J[0, 2] = jx
        J[1, 2] = jz
        J[0, 3 + 2 * leg] = lt * d1x
        J[1, 3 + 2 * leg] = lt * d1z
        return
    a2 = a1 + q[4 + 2 * leg]
    d2x, d2z = np.cos(a2), np.sin(a2)
    J[0, 2] = jx + lc * d2x
    J[1, 2] = jz + lc * d2z
    J[0, 3 + 2 * leg] = lt * d1x + lc * d2x
    J[1, 3 + 2 * leg] = lt * d1z + lc * d2z
    J[0, 4 + 2 * leg] = lc * d2x
    J[1, 4 + 2 * leg] = lc * d2z


@njit(cache=True)
def _com_jacobian(q, geom, body, J):
    """COM Jacobian of body 0..8 (0 torso, 1..4 thighs, 5..8 calves)."""
    hb, lt, lc = geom[0], geom[1], geom[2]
    th = q[2]
    for i in range(2):
        for j in range(N_Q):
            J[i, j] = 0.0
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    if body == 0:
        return  # torso COM is the root point
    leg = (body - 1) % N_LEGS
    is_calf = body > N_LEGS
    sgn = 1.0 if leg < 2 else -1.0
    a1 = th + q[3 + 2 * leg]
    d1x, d1z = np.cos(a1), np.sin(a1)
    hx = -sgn * hb * np.sin(th)
    hz = sgn * hb * np.cos(th)
    if not is_calf:
        J[0, 2] = hx + 0.5 * lt * d1x
        J[1, 2] = hz + 0.5 * lt * d1z
        J[0, 3 + 2 * leg] = 0.5 * lt * d1x
        J[1, 3 + 2 * leg] = 0.5 * lt * d1z
        return
    a2 = a1 + q[4 + 2 * leg]
    d2x, d2z = np.cos(a2), np.sin(a2)
    J[0, 2] = hx + lt * d1x + 0.5 * lc * d2x
    J[1, 2] = hz + lt * d1z + 0.5 * lc * d2z
    J[0, 3 + 2 * leg] = lt * d1x + 0.5 * lc * d2x
    J[1, 3 + 2 * leg] = lt * d1z + 0.5 * lc * d2z
    J[0, 4 + 2 * leg] = 0.5 * lc * d2x
    J[1, 4 + 2 * leg] = 0.5 * lc * d2z


@njit(cache=True)
def mass_matrix(q, geom, masses, inertias):
    """Joint-space inertia matrix, (11, 11), symmetric positive definite."""
    M = np.zeros((N_Q, N_Q))
    J = np.empty((2, N_Q))
    for body in range(9):
        if body == 0:
            m, inertia = masses[0], inertias[0]
        elif body <= N_LEGS:
            m, inertia = masses[1], inertias[1]
        else:
            m, inertia = masses[2], inertias[2]
        _com_jacobian(q, geom, body, J)
        for i in range(N_Q):
            ji0 = J[0, i]
            ji1 = J[1, i]
            if ji0 == 0.0 and ji1 == 0.0:
                continue
            for k in range(N_Q):
                M[i, k] += m * (ji0 * J[0, k] + ji1 * J[1, k])
        # angular rows: torso -> pitch; thigh -> pitch+hip; calf -> +knee
        if body == 0:
            M[2, 2] += inertia
        else:
            leg = (body - 1) % N_LEGS
            idx = np.empty(3, dtype=np.int64)
            idx[0] = 2
            idx[1] = 3 + 2 * leg
            idx[2] = 4 + 2 * leg
            n_idx = 3 if body > N_LEGS else 2
            for a in range(n_idx):
                for b in range(n_idx):
                    M[idx[a], idx[b]] += inertia
    return M


@njit(cache=True)
def bias_and_gravity(q, qd, geom, masses, gravity):
    """Generalized force from gravity minus the velocity-product terms."""
    hb, lt, lc = geom[0], geom[1], geom[2]
    th, thd = q[2], qd[2]
    Q = np.zeros(N_Q)
    J = np.empty((2, N_Q))
    for body in range(9):
        if body == 0:
            m = masses[0]
        elif body <= N_LEGS:
            m = masses[1]
        else:
            m = masses[2]
        _com_jacobian(q, geom, body, J)
        # gravity: m Jv^T (0, -g)
        for j in range(N_Q):
            Q[j] -= m * gravity * J[1, j]
        if body == 0:
            continue  # torso COM has no velocity-product acceleration
        leg = (body - 1) % N_LEGS
        sgn = 1.0 if leg < 2 else -1.0
        a1 = th + q[3 + 2 * leg]
        a1d = thd + qd[3 + 2 * leg]
        # a_bias = -thd^2 R r_hip - sum L alphadot^2 d(alpha)
        ax = -thd * thd * sgn * hb * np.cos(th)
        az = -thd * thd * sgn * hb * np.sin(th)
        if body <= N_LEGS:
            ax -= 0.5 * lt * a1d * a1d * np.sin(a1)
            az -= 0.5 * lt * a1d * a1d * (-np.cos(a1))
        else:
            a2 = a1 + q[4 + 2 * leg]
            a2d = a1d + qd[4 + 2 * leg]
            ax -= lt * a1d * a1d * np.sin(a1) + 0.5 * lc * a2d * a2d * np.sin(a2)
            az -= (lt * a1d * a1d * (-np.cos(a1))
                   + 0.5 * lc * a2d * a2d * (-np.cos(a2)))
        for j in range(N_Q):
            Q[j] -= m * (J[0, j] * ax + J[1, j] * az)
    return Q


@njit(cache=True)
def terrain_height(x, heights, cell, x0):
    u = (x - x0) / cell
    if u < 0.0:
        u = 0.0
    hi = heights.shape[0] - 1.000001
    if u > hi:
        u = hi
    i = int(u)
    frac = u - i
    return (1.0 - frac) * heights[i] + frac * heights[i + 1]


@njit(cache=True)
def pd_torques(q, qd, targets, strength, pd):
    """Clamped PD torque per joint; pd = [kp, kd, tau_max]."""
    kp, kd, tau_max = pd[0], pd[1], pd[2]
    tau = np.empty(N_JOINTS)
    for j in range(N_JOINTS):
        t = strength[j] * (kp * (targets[j] - q[3 + j]) - kd * qd[3 + j])
        if t > tau_max:
            t = tau_max
        elif t < -tau_max:
            t = -tau_max
        tau[j] = t
    return tau


@njit(cache=True)
def substep(q, qd, targets, h, geom, masses, inertias, gravity, contact,
            strength, pd, heights, cell, x0):
    """One semi-implicit Euler step with implicit contact damping.

    Mutates q and qd.  Returns (touching (10,), forces (10, 2)): a 0/1 mask
    of contacts that ended the substep with positive normal force, and the
    world-frame (tangential, normal) force applied at each point.
    """
    kn, dn, ct, mu = contact[0], contact[1], contact[2], contact[3]
    foot_r = contact[4]
    tau = pd_torques(q, qd, targets, strength, pd)
    M = mass_matrix(q, geom, masses, inertias)
    Q = bias_and_gravity(q, qd, geom, masses, gravity)
    for j in range(N_JOINTS):
        Q[3 + j] += tau[j]

    pts = contact_point_positions(q, geom)
    Jc = np.zeros((N_CONTACTS, 2, N_Q))
    spring = np.zeros(N_CONTACTS)
    # contact mode: 0 inactive, 1 fully implicit, 2 tangential clamped
    mode = np.zeros(N_CONTACTS, dtype=np.int64)
    J = np.empty((2, N_Q))
    any_active = False
    for pid in range(N_CONTACTS):
        depth = terrain_height(pts[pid, 0], heights, cell, x0) - pts[pid, 1]
        if pid < KNEE:  # feet are spheres of radius foot_r, not points
            depth += foot_r
        if depth <= 0.0:
            continue
        _point_jacobian(q, geom, pid, J)
        Jc[pid] = J
        spring[pid] = kn * depth
        mode[pid] = 1
        any_active = True

    forces = np.zeros((N_CONTACTS, 2))
    touching = np.zeros(N_CONTACTS)
    if not any_active:
        qdd = np.linalg.solve(M, Q)
        for j in range(N_Q):
            qd[j] += qdd[j] * h
            q[j] += qd[j] * h
        return touching, forces

    # Fixed-point iteration on the friction clamps: each pass re-solves the
    # implicit velocity update, then re-tightens every clamped tangential
    # force to mu * (current normal force).  The clamp<->normal coupling is
    # weak (a few percent), so this converges geometrically; the cap is a
    # safety net, not a tuning knob.
    clamp_ft = np.zeros(N_CONTACTS)
    for _ in range(12):
        A = M.copy()
        b = M @ qd + h * Q
        for pid in range(N_CONTACTS):
            if mode[pid] == 0:
                continue
            jx = Jc[pid, 0]
            jz = Jc[pid, 1]
            if mode[pid] == 1:
                for i in range(N_Q):
                    if jx[i] == 0.0 and jz[i] == 0.0:
                        continue
                    for k in range(N_Q):
                        A[i, k] += h * (ct * jx[i] * jx[k]
                                        + dn * jz[i] * jz[k])
                for i in range(N_Q):
                    b[i] += h * spring[pid] * jz[i]
            else:  # tangential clamped: implicit normal, constant friction
                for i in range(N_Q):
                    if jz[i] == 0.0:
                        continue
                    for k in range(N_Q):
                        A[i, k] += h * dn * jz[i] * jz[k]
                for i in range(N_Q):
                    b[i] += h * (spring[pid] * jz[i] + clamp_ft[pid] * jx[i])
        v_new = np.linalg.solve(A, b)

        dirty = False
        for pid in range(N_CONTACTS):
            if mode[pid] == 0:
                continue
            vx = 0.0
            vz = 0.0
            for j in range(N_Q):
                vx += Jc[pid, 0, j] * v_new[j]
                vz += Jc[pid, 1, j] * v_new[j]
            fn = spring[pid] - dn * vz
            if fn <= 0.0:
                mode[pid] = 0
                forces[pid, 0] = 0.0
                forces[pid, 1] = 0.0
                touching[pid] = 0.0
                dirty = True
                continue
            lim = mu * fn
            if mode[pid] == 1:
                ft = -ct * vx
                if abs(ft) > lim:
                    clamp_ft[pid] = lim if ft > 0.0 else -lim
                    mode[pid] = 2
                    dirty = True
                forces[pid, 0] = clamp_ft[pid] if mode[pid] == 2 else ft
            else:
                sgn = 1.0 if clamp_ft[pid] >= 0.0 else -1.0
                if vx > 1e-12:
                    sgn = -1.0
                elif vx < -1e-12:
                    sgn = 1.0
                want = sgn * lim
                if abs(want - clamp_ft[pid]) > 1e-12 * (1.0 + lim):
                    clamp_ft[pid] = want
                    dirty = True
                forces[pid, 0] = clamp_ft[pid]
            forces[pid, 1] = fn
            touching[pid] = 1.0
        if not dirty:
            break

    for j in range(N_Q):
        qd[j] = v_new[j]
        q[j] += qd[j] * h
    return touching, forces


@njit(cache=True)
def control_step(q, qd, targets, n_sub, h, geom, masses, inertias, gravity,
                 contact, strength, pd, heights, cell, x0):
    """Advance one control period (n_sub substeps of h seconds).

    Mutates q and qd.  Returns (touch_counts (10,), mean_root_acc (2,)):
    per-point counts of touching substeps and the average root acceleration
    over the period (what an IMU strapped to the torso center integrates).
    """
    counts = np.zeros(N_CONTACTS)
    v0x, v0z = qd[0], qd[1]
    for _ in range(n_sub):
        touching, _ = substep(q, qd, targets, h, geom, masses, inertias,
                              gravity, contact, strength, pd, heights, cell,
                              x0)
        for pid in range(N_CONTACTS):
            counts[pid] += touching[pid]
    mean_acc = np.empty(2)
    span = n_sub * h
    mean_acc[0] = (qd[0] - v0x) / span
    mean_acc[1] = (qd[1] - v0z) / span
    return counts, mean_acc


@njit(cache=True)
def total_energy(q, qd, geom, masses, inertias, gravity, contact,
                 heights, cell, x0):
    """Kinetic + gravitational + contact-spring energy of the full state."""
    M = mass_matrix(q, geom, masses, inertias)
    kin = 0.0
    for i in range(N_Q):
        for j in range(N_Q):
            kin += 0.5 * qd[i] * M[i, j] * qd[j]
    hb, lt, lc = geom[0], geom[1], geom[2]
    th = q[2]
    pot = masses[0] * gravity * q[1]
    for leg in range(N_LEGS):
        sgn = 1.0 if leg < 2 else -1.0
        hz = q[1] + sgn * hb * np.sin(th)
        a1 = th + q[3 + 2 * leg]
        thigh_z = hz - 0.5 * lt * np.cos(a1)
        a2 = a1 + q[4 + 2 * leg]
        calf_z = hz - lt * np.cos(a1) - 0.5 * lc * np.cos(a2)
        pot += gravity * (masses[1] * thigh_z + masses[2] * calf_z)
    kn = contact[0]
    foot_r = contact[4]
    pts = contact_point_positions(q, geom)
    spring = 0.0
    for pid in range(N_CONTACTS):
        depth = terrain_height(pts[pid, 0], heights, cell, x0) - pts[pid, 1]
        if pid < KNEE:
            depth += foot_r
        if depth > 0.0:
            spring += 0.5 * kn * depth * depth
    return kin + pot + spring
