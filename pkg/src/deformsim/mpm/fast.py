"""Numba fast path for plain (non-taped) frame simulation.

Serial per-particle kernels, deterministic accumulation order. Covers the
neo-hookean elastic law with purely elastic plasticity (the default twin
configuration); :func:`deformsim.mpm.engine.simulate_frame` falls back to
the vectorized numpy path for anything else. Cross-backend agreement is
asserted by tests at tight (but not bitwise) tolerance; within one backend
results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    AVAILABLE = True
except ImportError:  # pragma: no cover
    AVAILABLE = False

    def njit(*a, **k):  # noqa: D103
        def wrap(f):
            return f

        return wrap(a[0]) if a and callable(a[0]) else wrap


_ERR_NONE = 0
_ERR_ESCAPE = 1
_ERR_NONFINITE = 2

_SHAPE_SPHERE = 0
_SHAPE_BOX = 1
_SHAPE_CAPSULE = 2

_CTRL_GRASP = 0
_CTRL_PUSH = 1


def supports(law):
    return law.elastic_kind == "neo_hookean" and law.plastic_kind == "purely_elastic"


@njit(cache=True)
def _push_sdf(code, cx, cy, cz, radius, hx, hy, hz, half_len, px, py, pz):
    dx = px - cx
    dy = py - cy
    dz = pz - cz
    if code == _SHAPE_SPHERE:
        return np.sqrt(dx * dx + dy * dy + dz * dz) - radius
    if code == _SHAPE_BOX:
        qx = abs(dx) - hx
        qy = abs(dy) - hy
        qz = abs(dz) - hz
        ox = qx if qx > 0.0 else 0.0
        oy = qy if qy > 0.0 else 0.0
        oz = qz if qz > 0.0 else 0.0
        outside = np.sqrt(ox * ox + oy * oy + oz * oz)
        m = qx
        if qy > m:
            m = qy
        if qz > m:
            m = qz
        inside = m if m < 0.0 else 0.0
        return outside + inside
    z = dz
    if z > half_len:
        z = half_len
    elif z < -half_len:
        z = -half_len
    rz = dz - z
    return np.sqrt(dx * dx + dy * dy + rz * rz) - radius


@njit(cache=True)
def _push_normal(code, p0, p1, p2, p3, p4, p5, p6, p7, px, py, pz):
    h = 1e-6
    nx = (
        _push_sdf(code, p0, p1, p2, p3, p4, p5, p6, p7, px + h, py, pz)
        - _push_sdf(code, p0, p1, p2, p3, p4, p5, p6, p7, px - h, py, pz)
    ) / (2 * h)
    ny = (
        _push_sdf(code, p0, p1, p2, p3, p4, p5, p6, p7, px, py + h, pz)
        - _push_sdf(code, p0, p1, p2, p3, p4, p5, p6, p7, px, py - h, pz)
    ) / (2 * h)
    nz = (
        _push_sdf(code, p0, p1, p2, p3, p4, p5, p6, p7, px, py, pz + h)
        - _push_sdf(code, p0, p1, p2, p3, p4, p5, p6, p7, px, py, pz - h)
    ) / (2 * h)
    norm = np.sqrt(nx * nx + ny * ny + nz * nz)
    if norm < 1e-12:
        return 0.0, 0.0, 0.0
    return nx / norm, ny / norm, nz / norm


@njit(cache=True)
def _frame_kernel(
    x,
    v,
    C,
    F,
    m,
    V0,
    E,
    nu,
    mu_p,
    has_mu,
    nx,
    ny,
    nz,
    dx,
    ox,
    oy,
    oz,
    dt,
    n_sub,
    gx,
    gy,
    gz,
    has_ground,
    ground_h,
    mu_floor,
    det_lo,
    det_hi,
    ctrl_kinds,
    actions,
    grasp_offsets,
    grasp_indices,
    push_params,
    err,
):
    n = x.shape[0]
    n_nodes = nx * ny * nz
    gm = np.zeros(n_nodes)
    gmom = np.zeros((n_nodes, 3))
    gf = np.zeros((n_nodes, 3))
    gmu = np.zeros(n_nodes)
    gv = np.zeros((n_nodes, 3))
    wq = np.zeros((3, 3))
    dwq = np.zeros((3, 3))
    tau = np.zeros((3, 3))
    n_ctrl = ctrl_kinds.shape[0]
    inv_dx = 1.0 / dx
    four_inv_dx2 = 4.0 / (dx * dx)

    for _s in range(n_sub):
        gm[:] = 0.0
        gmom[:, :] = 0.0
        gf[:, :] = 0.0
        if has_mu:
            gmu[:] = 0.0

        # -- p2g --
        for p in range(n):
            mu_l = E[p] / (2.0 * (1.0 + nu[p]))
            lam_l = E[p] * nu[p] / ((1.0 + nu[p]) * (1.0 - 2.0 * nu[p]))
            f00, f01, f02 = F[p, 0, 0], F[p, 0, 1], F[p, 0, 2]
            f10, f11, f12 = F[p, 1, 0], F[p, 1, 1], F[p, 1, 2]
            f20, f21, f22 = F[p, 2, 0], F[p, 2, 1], F[p, 2, 2]
            det = (
                f00 * (f11 * f22 - f12 * f21)
                - f01 * (f10 * f22 - f12 * f20)
                + f02 * (f10 * f21 - f11 * f20)
            )
            logj = np.log(det)
            for a in range(3):
                for b in range(3):
                    bb = (
                        F[p, a, 0] * F[p, b, 0]
                        + F[p, a, 1] * F[p, b, 1]
                        + F[p, a, 2] * F[p, b, 2]
                    )
                    tau[a, b] = mu_l * bb
                tau[a, a] += -mu_l + lam_l * logj

            bx = int(np.floor((x[p, 0] - ox) * inv_dx - 0.5))
            by = int(np.floor((x[p, 1] - oy) * inv_dx - 0.5))
            bz = int(np.floor((x[p, 2] - oz) * inv_dx - 0.5))
            if (
                bx < 1
                or by < 1
                or bz < 1
                or bx > nx - 4
                or by > ny - 4
                or bz > nz - 4
            ):
                err[0] = _ERR_ESCAPE
                err[1] = p
                return
            fx = (x[p, 0] - ox) * inv_dx - bx
            fy = (x[p, 1] - oy) * inv_dx - by
            fz = (x[p, 2] - oz) * inv_dx - bz
            for a in range(3):
                f_a = fx if a == 0 else (fy if a == 1 else fz)
                wq[0, a] = 0.5 * (1.5 - f_a) ** 2
                wq[1, a] = 0.75 - (f_a - 1.0) ** 2
                wq[2, a] = 0.5 * (f_a - 0.5) ** 2
                dwq[0, a] = (f_a - 1.5) * inv_dx
                dwq[1, a] = -2.0 * (f_a - 1.0) * inv_dx
                dwq[2, a] = (f_a - 0.5) * inv_dx

            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        w = wq[i, 0] * wq[j, 1] * wq[k, 2]
                        gwx = dwq[i, 0] * wq[j, 1] * wq[k, 2]
                        gwy = wq[i, 0] * dwq[j, 1] * wq[k, 2]
                        gwz = wq[i, 0] * wq[j, 1] * dwq[k, 2]
                        dpx = (bx + i) * dx + ox - x[p, 0]
                        dpy = (by + j) * dx + oy - x[p, 1]
                        dpz = (bz + k) * dx + oz - x[p, 2]
                        node = ((bx + i) * ny + (by + j)) * nz + (bz + k)
                        wm = w * m[p]
                        gm[node] += wm
                        gmom[node, 0] += wm * (
                            v[p, 0] + C[p, 0, 0] * dpx + C[p, 0, 1] * dpy + C[p, 0, 2] * dpz
                        )
                        gmom[node, 1] += wm * (
                            v[p, 1] + C[p, 1, 0] * dpx + C[p, 1, 1] * dpy + C[p, 1, 2] * dpz
                        )
                        gmom[node, 2] += wm * (
                            v[p, 2] + C[p, 2, 0] * dpx + C[p, 2, 1] * dpy + C[p, 2, 2] * dpz
                        )
                        gf[node, 0] -= V0[p] * (
                            tau[0, 0] * gwx + tau[0, 1] * gwy + tau[0, 2] * gwz
                        )
                        gf[node, 1] -= V0[p] * (
                            tau[1, 0] * gwx + tau[1, 1] * gwy + tau[1, 2] * gwz
                        )
                        gf[node, 2] -= V0[p] * (
                            tau[2, 0] * gwx + tau[2, 1] * gwy + tau[2, 2] * gwz
                        )
                        if has_mu:
                            gmu[node] += wm * mu_p[p]

        # -- grid op --
        for node in range(n_nodes):
            if gm[node] <= 1e-12:
                gv[node, 0] = 0.0
                gv[node, 1] = 0.0
                gv[node, 2] = 0.0
                continue
            inv_m = 1.0 / gm[node]
            vx = gmom[node, 0] * inv_m + dt * (gf[node, 0] * inv_m + gx)
            vy = gmom[node, 1] * inv_m + dt * (gf[node, 1] * inv_m + gy)
            vz = gmom[node, 2] * inv_m + dt * (gf[node, 2] * inv_m + gz)

            k_id = node % nz
            j_id = (node // nz) % ny
            i_id = node // (ny * nz)

            if has_ground:
                node_z = oz + k_id * dx
                if node_z <= ground_h and vz < 0.0:
                    mu_n = (gmu[node] * inv_m) if has_mu else mu_floor
                    vt = np.sqrt(vx * vx + vy * vy + 1e-24)
                    scale = 1.0 - mu_n * (-vz) / vt
                    if scale < 0.0:
                        scale = 0.0
                    vx *= scale
                    vy *= scale
                    vz = 0.0

            for c in range(n_ctrl):
                if ctrl_kinds[c] != _CTRL_PUSH:
                    continue
                px = i_id * dx + ox
                py = j_id * dx + oy
                pz = k_id * dx + oz
                sd = _push_sdf(
                    int(push_params[c, 0]),
                    push_params[c, 1],
                    push_params[c, 2],
                    push_params[c, 3],
                    push_params[c, 4],
                    push_params[c, 5],
                    push_params[c, 6],
                    push_params[c, 7],
                    push_params[c, 8],
                    px,
                    py,
                    pz,
                )
                if sd >= 0.0:
                    continue
                nxn, nyn, nzn = _push_normal(
                    int(push_params[c, 0]),
                    push_params[c, 1],
                    push_params[c, 2],
                    push_params[c, 3],
                    push_params[c, 4],
                    push_params[c, 5],
                    push_params[c, 6],
                    push_params[c, 7],
                    push_params[c, 8],
                    px,
                    py,
                    pz,
                )
                rx = vx - actions[c, 0]
                ry = vy - actions[c, 1]
                rz = vz - actions[c, 2]
                vn = rx * nxn + ry * nyn + rz * nzn
                if vn >= 0.0:
                    continue
                tx = rx - vn * nxn
                ty = ry - vn * nyn
                tz = rz - vn * nzn
                tn = np.sqrt(tx * tx + ty * ty + tz * tz + 1e-24)
                scale = 1.0 - push_params[c, 9] * (-vn) / tn
                if scale < 0.0:
                    scale = 0.0
                vx = actions[c, 0] + tx * scale
                vy = actions[c, 1] + ty * scale
                vz = actions[c, 2] + tz * scale

            # wall slip on the outer margin
            if (i_id < 2 and vx < 0.0) or (i_id > nx - 3 and vx > 0.0):
                vx = 0.0
            if (j_id < 2 and vy < 0.0) or (j_id > ny - 3 and vy > 0.0):
                vy = 0.0
            if (k_id < 2 and vz < 0.0) or (k_id > nz - 3 and vz > 0.0):
                vz = 0.0

            gv[node, 0] = vx
            gv[node, 1] = vy
            gv[node, 2] = vz

        # grasp overwrites win over everything
        for c in range(n_ctrl):
            if ctrl_kinds[c] != _CTRL_GRASP:
                continue
            for gi in range(grasp_offsets[c], grasp_offsets[c + 1]):
                p = grasp_indices[gi]
                bx = int(np.floor((x[p, 0] - ox) * inv_dx - 0.5))
                by = int(np.floor((x[p, 1] - oy) * inv_dx - 0.5))
                bz = int(np.floor((x[p, 2] - oz) * inv_dx - 0.5))
                for i in range(3):
                    for j in range(3):
                        for k in range(3):
                            node = ((bx + i) * ny + (by + j)) * nz + (bz + k)
                            gv[node, 0] = actions[c, 0]
                            gv[node, 1] = actions[c, 1]
                            gv[node, 2] = actions[c, 2]

        # -- g2p --
        for p in range(n):
            bx = int(np.floor((x[p, 0] - ox) * inv_dx - 0.5))
            by = int(np.floor((x[p, 1] - oy) * inv_dx - 0.5))
            bz = int(np.floor((x[p, 2] - oz) * inv_dx - 0.5))
            fx = (x[p, 0] - ox) * inv_dx - bx
            fy = (x[p, 1] - oy) * inv_dx - by
            fz = (x[p, 2] - oz) * inv_dx - bz
            for a in range(3):
                f_a = fx if a == 0 else (fy if a == 1 else fz)
                wq[0, a] = 0.5 * (1.5 - f_a) ** 2
                wq[1, a] = 0.75 - (f_a - 1.0) ** 2
                wq[2, a] = 0.5 * (f_a - 0.5) ** 2

            nvx = 0.0
            nvy = 0.0
            nvz = 0.0
            c00 = 0.0
            c01 = 0.0
            c02 = 0.0
            c10 = 0.0
            c11 = 0.0
            c12 = 0.0
            c20 = 0.0
            c21 = 0.0
            c22 = 0.0
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        w = wq[i, 0] * wq[j, 1] * wq[k, 2]
                        node = ((bx + i) * ny + (by + j)) * nz + (bz + k)
                        vx = gv[node, 0]
                        vy = gv[node, 1]
                        vz = gv[node, 2]
                        dpx = (bx + i) * dx + ox - x[p, 0]
                        dpy = (by + j) * dx + oy - x[p, 1]
                        dpz = (bz + k) * dx + oz - x[p, 2]
                        nvx += w * vx
                        nvy += w * vy
                        nvz += w * vz
                        c00 += w * vx * dpx
                        c01 += w * vx * dpy
                        c02 += w * vx * dpz
                        c10 += w * vy * dpx
                        c11 += w * vy * dpy
                        c12 += w * vy * dpz
                        c20 += w * vz * dpx
                        c21 += w * vz * dpy
                        c22 += w * vz * dpz

            v[p, 0] = nvx
            v[p, 1] = nvy
            v[p, 2] = nvz
            C[p, 0, 0] = c00 * four_inv_dx2
            C[p, 0, 1] = c01 * four_inv_dx2
            C[p, 0, 2] = c02 * four_inv_dx2
            C[p, 1, 0] = c10 * four_inv_dx2
            C[p, 1, 1] = c11 * four_inv_dx2
            C[p, 1, 2] = c12 * four_inv_dx2
            C[p, 2, 0] = c20 * four_inv_dx2
            C[p, 2, 1] = c21 * four_inv_dx2
            C[p, 2, 2] = c22 * four_inv_dx2
            x[p, 0] += dt * nvx
            x[p, 1] += dt * nvy
            x[p, 2] += dt * nvz
            if not (np.isfinite(x[p, 0]) and np.isfinite(x[p, 1]) and np.isfinite(x[p, 2])):
                err[0] = _ERR_NONFINITE
                err[1] = p
                return

            # F <- (I + dt C) F
            a00 = 1.0 + dt * C[p, 0, 0]
            a01 = dt * C[p, 0, 1]
            a02 = dt * C[p, 0, 2]
            a10 = dt * C[p, 1, 0]
            a11 = 1.0 + dt * C[p, 1, 1]
            a12 = dt * C[p, 1, 2]
            a20 = dt * C[p, 2, 0]
            a21 = dt * C[p, 2, 1]
            a22 = 1.0 + dt * C[p, 2, 2]
            f00 = a00 * F[p, 0, 0] + a01 * F[p, 1, 0] + a02 * F[p, 2, 0]
            f01 = a00 * F[p, 0, 1] + a01 * F[p, 1, 1] + a02 * F[p, 2, 1]
            f02 = a00 * F[p, 0, 2] + a01 * F[p, 1, 2] + a02 * F[p, 2, 2]
            f10 = a10 * F[p, 0, 0] + a11 * F[p, 1, 0] + a12 * F[p, 2, 0]
            f11 = a10 * F[p, 0, 1] + a11 * F[p, 1, 1] + a12 * F[p, 2, 1]
            f12 = a10 * F[p, 0, 2] + a11 * F[p, 1, 2] + a12 * F[p, 2, 2]
            f20 = a20 * F[p, 0, 0] + a21 * F[p, 1, 0] + a22 * F[p, 2, 0]
            f21 = a20 * F[p, 0, 1] + a21 * F[p, 1, 1] + a22 * F[p, 2, 1]
            f22 = a20 * F[p, 0, 2] + a21 * F[p, 1, 2] + a22 * F[p, 2, 2]
            F[p, 0, 0] = f00
            F[p, 0, 1] = f01
            F[p, 0, 2] = f02
            F[p, 1, 0] = f10
            F[p, 1, 1] = f11
            F[p, 1, 2] = f12
            F[p, 2, 0] = f20
            F[p, 2, 1] = f21
            F[p, 2, 2] = f22

            det = (
                f00 * (f11 * f22 - f12 * f21)
                - f01 * (f10 * f22 - f12 * f20)
                + f02 * (f10 * f21 - f11 * f20)
            )
            big = False
            for a in range(3):
                for b in range(3):
                    if abs(F[p, a, b]) > 1e3:
                        big = True
            if det <= 0.0 or big:
                u_m, s_m, vh_m = np.linalg.svd(F[p])
                for a in range(3):
                    if s_m[a] < det_lo:
                        s_m[a] = det_lo
                    elif s_m[a] > det_hi:
                        s_m[a] = det_hi
                F[p] = (u_m * s_m.reshape(1, 3)) @ vh_m

        # push controllers advance with their commanded velocity
        for c in range(n_ctrl):
            if ctrl_kinds[c] == _CTRL_PUSH:
                push_params[c, 1] += actions[c, 0] * dt
                push_params[c, 2] += actions[c, 1] * dt
                push_params[c, 3] += actions[c, 2] * dt


def simulate_frame_fast(particles, props, law, grid, config, controllers=(), actions=None):
    """Run one frame with the numba kernel; mutates ``particles``.

    Falls back is handled by the caller; this function assumes
    :func:`supports` returned True for the law.
    """
    from ..errors import SimulationFault

    n = particles.count
    E = _as_array(props.get("E", law.E), n)
    nu = _as_array(props.get("nu", law.nu), n)
    mu_arr = props.get("mu")
    has_mu = mu_arr is not None
    mu_p = _as_array(mu_arr if has_mu else 0.0, n)
    mass = _as_array(props["m"], n) if props.get("m") is not None else particles.m

    n_ctrl = len(controllers)
    ctrl_kinds = np.zeros(n_ctrl, dtype=np.int64)
    grasp_chunks = []
    grasp_offsets = np.zeros(n_ctrl + 1, dtype=np.int64)
    push_params = np.zeros((max(n_ctrl, 1), 10))
    for c, ctrl in enumerate(controllers):
        if ctrl.kind == "grasp":
            ctrl_kinds[c] = _CTRL_GRASP
            grasp_chunks.append(ctrl.indices)
            grasp_offsets[c + 1] = grasp_offsets[c] + len(ctrl.indices)
        else:
            ctrl_kinds[c] = _CTRL_PUSH
            grasp_offsets[c + 1] = grasp_offsets[c]
            code = {"sphere": _SHAPE_SPHERE, "box": _SHAPE_BOX, "capsule": _SHAPE_CAPSULE}[
                ctrl.shape
            ]
            he = ctrl.half_extents if ctrl.half_extents is not None else np.zeros(3)
            push_params[c] = [
                code,
                ctrl.center[0],
                ctrl.center[1],
                ctrl.center[2],
                ctrl.radius,
                he[0],
                he[1],
                he[2],
                ctrl.axis_half_length,
                ctrl.friction,
            ]
    grasp_indices = (
        np.concatenate(grasp_chunks).astype(np.int64)
        if grasp_chunks
        else np.zeros(0, dtype=np.int64)
    )
    if actions is None:
        actions = np.zeros((n_ctrl, 3))
    actions = np.ascontiguousarray(np.asarray(actions, dtype=np.float64).reshape(n_ctrl, 3))

    g = np.asarray(config.gravity, dtype=np.float64)
    err = np.zeros(2, dtype=np.int64)
    nx, ny, nz = grid.resolution

    _frame_kernel(
        particles.x,
        particles.v,
        particles.C,
        particles.F,
        mass,
        particles.V0,
        E,
        nu,
        mu_p,
        has_mu,
        nx,
        ny,
        nz,
        grid.dx,
        grid.origin[0],
        grid.origin[1],
        grid.origin[2],
        config.dt,
        config.substeps_per_frame,
        g[0],
        g[1],
        g[2],
        config.ground_height is not None,
        config.ground_height if config.ground_height is not None else 0.0,
        config.mu_floor,
        config.det_clamp[0],
        config.det_clamp[1],
        ctrl_kinds,
        actions,
        grasp_offsets,
        grasp_indices,
        push_params,
        err,
    )

    for c, ctrl in enumerate(controllers):
        if ctrl.kind == "push":
            ctrl.center = push_params[c, 1:4].copy()

    if err[0] == _ERR_ESCAPE:
        p = int(err[1])
        raise SimulationFault(
            "particle outside grid interior margin",
            particle=p,
            position=tuple(np.round(particles.x[p], 5)),
        )
    if err[0] == _ERR_NONFINITE:
        raise SimulationFault("non-finite particle state after g2p", particle=int(err[1]))
    return particles


def _as_array(value, n):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    return np.ascontiguousarray(arr)
