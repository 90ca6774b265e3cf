"""Numba kernels for the planar articulated-body integrator.

Everything here works on flat arrays so that it can be JIT compiled. The
public wrappers live in :mod:`morphsim.physics`.

Layout conventions
------------------
Links are stored in topological order (``parent[i] < i``, link 0 is the root).
Joint ``k`` connects ``parent[k + 1]`` to link ``k + 1`` and drives generalized
coordinate ``3 + k``. Coordinates 0..2 are root x, root y and root angle.
"""
import numpy as np
from numba import njit

# indices into the `params` vector
P_GRAVITY = 0
P_K_CONTACT = 1
P_C_CONTACT = 2
P_MU = 3
P_TORQUE_LIMIT = 4
P_CONTACT_TOL = 5
P_LIMIT_BAUMGARTE = 6
P_PGS_ITERS = 7
N_PARAMS = 8


@njit(cache=True)
def _rot(phi, v0, v1):
    c = np.cos(phi)
    s = np.sin(phi)
    return c * v0 - s * v1, s * v0 + c * v1


@njit(cache=True)
def forward_kinematics(parent, axis, length, anchor, offset, q):
    """Absolute link angles, link origins (joint locations), segment starts and tips.

    A link's segment runs from ``origin - offset * length * axis`` to
    ``origin + (1 - offset) * length * axis``.
    """
    nl = parent.shape[0]
    phi = np.empty(nl)
    origin = np.empty((nl, 2))
    start = np.empty((nl, 2))
    tip = np.empty((nl, 2))
    phi[0] = q[2]
    origin[0, 0] = q[0]
    origin[0, 1] = q[1]
    for i in range(nl):
        if i > 0:
            p = parent[i]
            phi[i] = phi[p] + q[2 + i]
            dx, dy = _rot(phi[p], axis[p, 0], axis[p, 1])
            origin[i, 0] = origin[p, 0] + anchor[i] * length[p] * dx
            origin[i, 1] = origin[p, 1] + anchor[i] * length[p] * dy
        dx, dy = _rot(phi[i], axis[i, 0], axis[i, 1])
        start[i, 0] = origin[i, 0] - offset[i] * length[i] * dx
        start[i, 1] = origin[i, 1] - offset[i] * length[i] * dy
        tip[i, 0] = start[i, 0] + length[i] * dx
        tip[i, 1] = start[i, 1] + length[i] * dy
    return phi, origin, start, tip


@njit(cache=True)
def _omega(parent, qd):
    nl = parent.shape[0]
    w = np.empty(nl)
    w[0] = qd[2]
    for i in range(1, nl):
        w[i] = w[parent[i]] + qd[2 + i]
    return w


@njit(cache=True)
def _point_jacobian(parent, origin, link, px, py, ndof, J):
    """Fill J (2 x ndof) with d(point)/dq for a point rigidly attached to `link`."""
    for k in range(ndof):
        J[0, k] = 0.0
        J[1, k] = 0.0
    J[0, 0] = 1.0
    J[1, 1] = 1.0
    i = link
    while True:
        rx = px - origin[i, 0]
        ry = py - origin[i, 1]
        col = 2 if i == 0 else 2 + i
        J[0, col] = -ry
        J[1, col] = rx
        if i == 0:
            break
        i = parent[i]


@njit(cache=True)
def _point_bias(parent, origin, w, link, px, py):
    """Acceleration of an attached point when all generalized accelerations are zero."""
    ax = 0.0
    ay = 0.0
    # walk from `link` to the root; each link contributes -w^2 * (its lever)
    cx = px
    cy = py
    i = link
    while True:
        rx = cx - origin[i, 0]
        ry = cy - origin[i, 1]
        ax -= w[i] * w[i] * rx
        ay -= w[i] * w[i] * ry
        cx = origin[i, 0]
        cy = origin[i, 1]
        if i == 0:
            break
        i = parent[i]
    return ax, ay


@njit(cache=True)
def _com(start, tip, i):
    return 0.5 * (start[i, 0] + tip[i, 0]), 0.5 * (start[i, 1] + tip[i, 1])


@njit(cache=True)
def _lin_momentum_angular_part(parent, axis, length, anchor, offset, mass, q, qd):
    """Sum of m_i * J_i[:, 2:] @ qd[2:] (translation-invariant part of momentum)."""
    nl = parent.shape[0]
    ndof = nl + 2
    phi, origin, start, tip = forward_kinematics(parent, axis, length, anchor, offset, q)
    J = np.zeros((2, ndof))
    px = 0.0
    py = 0.0
    for i in range(nl):
        cx, cy = _com(start, tip, i)
        _point_jacobian(parent, origin, i, cx, cy, ndof, J)
        for k in range(2, ndof):
            px += mass[i] * J[0, k] * qd[k]
            py += mass[i] * J[1, k] * qd[k]
    return px, py


@njit(cache=True)
def substep(parent, axis, length, anchor, offset, mass, inertia, halfwidth,
            lower, upper, fric, fixed_root,
            q, qd, tau, k_imp, d_imp, target,
            rf_link, rf_local, rf_force, flags_in, params, dt):
    """One semi-implicit Euler step.

    tau      explicit joint torques (nj)
    k_imp    per-joint stiffness integrated implicitly toward `target` (nj)
    d_imp    per-joint damping integrated implicitly (nj)
    rf_*     residual forces, applied only when flags_in[rf_link] is set
    Returns (q_new, qd_new, flags_out, ok).
    """
    nl = parent.shape[0]
    nj = nl - 1
    ndof = nl + 2
    g = params[P_GRAVITY]
    k_c = params[P_K_CONTACT]
    c_c = params[P_C_CONTACT]
    mu = params[P_MU]
    tol = params[P_CONTACT_TOL]
    beta = params[P_LIMIT_BAUMGARTE]
    iters = int(params[P_PGS_ITERS])

    phi, origin, start, tip = forward_kinematics(parent, axis, length, anchor, offset, q)
    w = _omega(parent, qd)

    M = np.zeros((ndof, ndof))
    f = np.zeros(ndof)
    J = np.zeros((2, ndof))
    total_mass = 0.0
    for i in range(nl):
        cx, cy = _com(start, tip, i)
        _point_jacobian(parent, origin, i, cx, cy, ndof, J)
        bx, by = _point_bias(parent, origin, w, i, cx, cy)
        m = mass[i]
        total_mass += m
        for a in range(ndof):
            f[a] += m * (J[0, a] * (-bx) + J[1, a] * (-g - by))
            for b in range(ndof):
                M[a, b] += m * (J[0, a] * J[0, b] + J[1, a] * J[1, b])
        # angular part: d(phi_i)/dq is 1 on the root angle and every joint on the chain
        j = i
        while True:
            ca = 2 if j == 0 else 2 + j
            k = i
            while True:
                cb = 2 if k == 0 else 2 + k
                M[ca, cb] += inertia[i]
                if k == 0:
                    break
                k = parent[k]
            if j == 0:
                break
            j = parent[j]

    A = M.copy()
    for k in range(nj):
        f[3 + k] += tau[k] + k_imp[k] * (target[k] - q[3 + k])
        A[3 + k, 3 + k] += dt * (d_imp[k] + dt * k_imp[k])
    if fixed_root:
        for a in range(3):
            for b in range(ndof):
                A[a, b] = 0.0
                A[b, a] = 0.0
            A[a, a] = 1.0
    Ainv = np.linalg.inv(A)

    # external forces: residual (gated), ground normal penalty
    ext_x = 0.0
    ext_y = -g * total_mass
    for r in range(rf_link.shape[0]):
        lk = rf_link[r]
        if not flags_in[lk]:
            continue
        ox, oy = _rot(phi[lk], rf_local[r, 0], rf_local[r, 1])
        px = origin[lk, 0] + ox
        py = origin[lk, 1] + oy
        _point_jacobian(parent, origin, lk, px, py, ndof, J)
        for a in range(ndof):
            f[a] += J[0, a] * rf_force[r, 0] + J[1, a] * rf_force[r, 1]
        ext_x += rf_force[r, 0]
        ext_y += rf_force[r, 1]

    n_pts = 2 * nl
    c_active = np.zeros(n_pts, dtype=np.bool_)
    c_normal = np.zeros(n_pts)
    c_jt = np.zeros((n_pts, ndof))
    for i in range(nl):
        for e in range(2):
            if e == 0:
                px = start[i, 0]
                py = start[i, 1]
            else:
                px = tip[i, 0]
                py = tip[i, 1]
            pen = halfwidth[i] - py
            if pen <= 0.0:
                continue
            _point_jacobian(parent, origin, i, px, py, ndof, J)
            vn = 0.0
            inv_m = 0.0
            for a in range(ndof):
                vn += J[1, a] * qd[a]
                s = 0.0
                for b in range(ndof):
                    s += Ainv[a, b] * J[1, b]
                inv_m += J[1, a] * s
            m_eff = 1.0 / inv_m if inv_m > 1e-12 else 1e12
            kk = min(k_c, 0.5 * m_eff / (dt * dt))
            cc = min(c_c, m_eff / dt)
            fn = kk * pen - cc * vn
            if fn <= 0.0:
                continue
            idx = 2 * i + e
            c_active[idx] = True
            c_normal[idx] = fn
            for a in range(ndof):
                f[a] += J[1, a] * fn
                c_jt[idx, a] = J[0, a]
            ext_y += fn

    rhs = np.zeros(ndof)
    for a in range(ndof):
        s = 0.0
        for b in range(ndof):
            s += M[a, b] * qd[b]
        rhs[a] = s + dt * f[a]
    if fixed_root:
        rhs[0] = 0.0
        rhs[1] = 0.0
        rhs[2] = 0.0
    v = Ainv @ rhs

    # projected Gauss-Seidel over tangential contact friction, joint limits
    # and joint dry friction
    c_imp = np.zeros(n_pts)
    c_minv_jt = np.zeros((n_pts, ndof))
    c_meff = np.zeros(n_pts)
    for idx in range(n_pts):
        if not c_active[idx]:
            continue
        s_tot = 0.0
        for a in range(ndof):
            s = 0.0
            for b in range(ndof):
                s += Ainv[a, b] * c_jt[idx, b]
            c_minv_jt[idx, a] = s
            s_tot += c_jt[idx, a] * s
        c_meff[idx] = 1.0 / s_tot if s_tot > 1e-12 else 0.0
    lim_imp = np.zeros(nj)
    fr_imp = np.zeros(nj)
    for it in range(iters):
        for idx in range(n_pts):
            if not c_active[idx]:
                continue
            vt = 0.0
            for a in range(ndof):
                vt += c_jt[idx, a] * v[a]
            cap = mu * c_normal[idx] * dt
            new = c_imp[idx] - vt * c_meff[idx]
            if new > cap:
                new = cap
            elif new < -cap:
                new = -cap
            dl = new - c_imp[idx]
            c_imp[idx] = new
            for a in range(ndof):
                v[a] += c_minv_jt[idx, a] * dl
        for k in range(nj):
            a = 3 + k
            dkk = Ainv[a, a]
            if dkk <= 0.0:
                continue
            p = q[a]
            # one-sided limit impulses, accumulated; sign(lim_imp) fixed by side
            if p + dt * v[a] > upper[k] or lim_imp[k] < 0.0:
                if p > upper[k]:
                    vdes = beta * (upper[k] - p) / dt
                else:
                    vdes = (upper[k] - p) / dt
                new = lim_imp[k] + (vdes - v[a]) / dkk
                if new > 0.0:
                    new = 0.0
                dl = new - lim_imp[k]
                lim_imp[k] = new
                for b in range(ndof):
                    v[b] += Ainv[b, a] * dl
            elif p + dt * v[a] < lower[k] or lim_imp[k] > 0.0:
                if p < lower[k]:
                    vdes = beta * (lower[k] - p) / dt
                else:
                    vdes = (lower[k] - p) / dt
                new = lim_imp[k] + (vdes - v[a]) / dkk
                if new < 0.0:
                    new = 0.0
                dl = new - lim_imp[k]
                lim_imp[k] = new
                for b in range(ndof):
                    v[b] += Ainv[b, a] * dl
            if fric[k] > 0.0:
                cap = fric[k] * dt
                new = fr_imp[k] - v[a] / dkk
                if new > cap:
                    new = cap
                elif new < -cap:
                    new = -cap
                dl = new - fr_imp[k]
                fr_imp[k] = new
                for b in range(ndof):
                    v[b] += Ainv[b, a] * dl

    q_new = q.copy()
    for a in range(2, ndof):
        q_new[a] = q[a] + dt * v[a]
    if fixed_root:
        v[0] = 0.0
        v[1] = 0.0
        v[2] = 0.0
        q_new[2] = q[2]
    else:
        # enforce the discrete centre-of-mass law P' = P + dt * F_ext + friction impulses
        ax_, ay_ = _lin_momentum_angular_part(parent, axis, length, anchor, offset, mass, q, qd)
        p0x = total_mass * qd[0] + ax_
        p0y = total_mass * qd[1] + ay_
        tx = 0.0
        for idx in range(n_pts):
            tx += c_imp[idx]
        ptx = p0x + dt * ext_x + tx
        pty = p0y + dt * ext_y
        bx_, by_ = _lin_momentum_angular_part(parent, axis, length, anchor, offset, mass, q_new, v)
        v[0] = (ptx - bx_) / total_mass
        v[1] = (pty - by_) / total_mass
    q_new[0] = q[0] + dt * v[0]
    q_new[1] = q[1] + dt * v[1]

    ok = True
    for a in range(ndof):
        if not (np.isfinite(q_new[a]) and np.isfinite(v[a])):
            ok = False
    phi2, origin2, start2, tip2 = forward_kinematics(parent, axis, length, anchor, offset, q_new)
    flags_out = np.zeros(nl, dtype=np.bool_)
    for i in range(nl):
        low = min(start2[i, 1], tip2[i, 1]) - halfwidth[i]
        flags_out[i] = low <= tol
    return q_new, v, flags_out, ok


@njit(cache=True)
def control_step(parent, axis, length, anchor, offset, mass, inertia, halfwidth,
                 lower, upper, fric, gear, fixed_root,
                 q, qd, flags, pd_target, kp, kd,
                 rf_link, rf_local, rf_force, params, dt, nsub):
    """`nsub` substeps under meta-PD control with PD terms integrated implicitly.

    A joint whose raw PD torque exceeds the torque limit receives the clamped
    torque explicitly instead.
    """
    nj = parent.shape[0] - 1
    limit = params[P_TORQUE_LIMIT]
    tau = np.zeros(nj)
    k_imp = np.zeros(nj)
    d_imp = np.zeros(nj)
    ok = True
    for s in range(nsub):
        for k in range(nj):
            raw = kp[k] * (pd_target[k] - q[3 + k]) - kd[k] * qd[3 + k]
            if raw > limit or raw < -limit:
                tau[k] = gear[k] * (limit if raw > 0 else -limit)
                k_imp[k] = 0.0
                d_imp[k] = 0.0
            else:
                tau[k] = 0.0
                k_imp[k] = gear[k] * kp[k]
                d_imp[k] = gear[k] * kd[k]
        q, qd, flags, ok = substep(parent, axis, length, anchor, offset, mass, inertia, halfwidth,
                                   lower, upper, fric, fixed_root,
                                   q, qd, tau, k_imp, d_imp, pd_target,
                                   rf_link, rf_local, rf_force, flags, params, dt)
        if not ok:
            break
    return q, qd, flags, ok
