"""Numba kernels for one MLS-MPM substep and its adjoint.

Layout conventions
------------------
Particles are structure-of-arrays: ``x, v`` (n, 3), ``C, F`` (n, 3, 3),
``mass, vol`` (n,), ``mat`` (n,) int.  The grid is dense and flattened
(``idx = (i * ny + j) * nz + k``); only nodes touched by the current substep
are listed in ``active`` and reset afterwards, so a substep costs
O(particles) rather than O(grid).

``prm`` packs the float parameters::

    0 dt, 1 dx, 2-4 gravity, 5 mu (Lame), 6 lambda (Lame), 7 fluid bulk,
    8 friction, 9 granular eps, 10 contact band width, 11 sigma floor

``iprm`` packs ``nx, ny, nz, wall_margin``.

Effector boxes for a run of S substeps and nb boxes: centers ``bc`` (S, nb, 3),
rotations ``bR`` (S, nb, 3, 3), half extents ``bh`` (nb, 3), linear velocity
``bv``, angular velocity ``bw`` and pivot ``bp`` (S, nb, 3).

Every kernel is serial: scatter order is particle-major, so results are
bitwise reproducible.  Status codes: 0 ok, 1 domain escape, 2 CFL violation,
3 non-finite state.
"""
import math

import numpy as np
from numba import njit

from ..linalg3 import (cofactor3, det3, isotropic_adjoint, matmul3, matmul3_nt, polar_newton,
                       polar_rotation_adjoint, svd3)

ELASTIC = 0
GRANULAR = 1
FLUID = 2

OK = 0
DOMAIN_ESCAPE = 1
CFL_VIOLATION = 2
NON_FINITE = 3


@njit(cache=True, nogil=True)
def _stencil(xp, inv_dx, dims, base, fx, w, dw):
    """Base node, fractional offsets, per-axis weights and their derivatives.

    Returns False when the 3x3x3 stencil does not fit in the grid.
    """
    for a in range(3):
        s = xp[a] * inv_dx
        if not (s >= 1.0 and s <= dims[a] - 2.0):
            return False
        b = int(math.floor(s - 0.5))
        base[a] = b
        f = s - b
        fx[a] = f
        w[a, 0] = 0.5 * (1.5 - f) ** 2
        w[a, 1] = 0.75 - (f - 1.0) ** 2
        w[a, 2] = 0.5 * (f - 0.5) ** 2
        dw[a, 0] = -(1.5 - f) * inv_dx
        dw[a, 1] = -2.0 * (f - 1.0) * inv_dx
        dw[a, 2] = (f - 0.5) * inv_dx
    return True


@njit(cache=True, nogil=True)
def _project_and_stress(Fn, mat, prm, Ft, tau, U, sig, V, gsig, dgsig, R, need_svd):
    """Material projection of the updated F and the Kirchhoff stress P F^T.

    Returns 1 when the singular-value projection was active, 0 otherwise.
    Fluid stores an isotropic F built from the (floored) volume ratio.
    Elastic F that provably sit above the singular-value floor take the
    rotation from a Newton polar iteration; the SVD factors are then only
    computed when ``need_svd`` (the adjoint replay) asks for them.
    """
    mu = prm[5]
    lam = prm[6]
    if mat == FLUID:
        J = det3(Fn)
        floor_ = prm[11]
        Jc = J if J > floor_ else floor_
        c = np.cbrt(Jc)
        for i in range(3):
            for j in range(3):
                Ft[i, j] = c if i == j else 0.0
                tau[i, j] = prm[7] * (1.0 - Jc) if i == j else 0.0
        return 0
    if mat == ELASTIC:
        # sigma_min >= det / sigma_max^2 >= det / |F|_F^2
        J = det3(Fn)
        nf = 0.0
        for i in range(3):
            for j in range(3):
                nf += Fn[i, j] * Fn[i, j]
        if J > prm[11] * nf:
            polar_newton(Fn, R)
            if need_svd:
                svd3(Fn, U, sig, V)
                for a in range(3):
                    gsig[a] = sig[a]
                    dgsig[a] = 1.0
            vol_term = lam * (J - 1.0) * J
            two_mu = 2.0 * mu
            for i in range(3):
                d0 = Fn[i, 0] - R[i, 0]
                d1 = Fn[i, 1] - R[i, 1]
                d2 = Fn[i, 2] - R[i, 2]
                for j in range(3):
                    Ft[i, j] = Fn[i, j]
                    tau[i, j] = two_mu * (d0 * Fn[j, 0] + d1 * Fn[j, 1] + d2 * Fn[j, 2])
                tau[i, i] += vol_term
            return 0
    svd3(Fn, U, sig, V)
    if mat == GRANULAR:
        lo = 1.0 - prm[9]
        hi = 1.0 + prm[9]
    else:
        lo = prm[11]
        hi = np.inf
    projected = 0
    for a in range(3):
        s = sig[a]
        if s < lo:
            gsig[a] = lo
            dgsig[a] = 0.0
            projected = 1
        elif s > hi:
            gsig[a] = hi
            dgsig[a] = 0.0
            projected = 1
        else:
            gsig[a] = s
            dgsig[a] = 1.0
    for i in range(3):
        for j in range(3):
            R[i, j] = U[i, 0] * V[j, 0] + U[i, 1] * V[j, 1] + U[i, 2] * V[j, 2]
            if projected:
                Ft[i, j] = (U[i, 0] * gsig[0] * V[j, 0] + U[i, 1] * gsig[1] * V[j, 1]
                            + U[i, 2] * gsig[2] * V[j, 2])
            else:
                Ft[i, j] = Fn[i, j]
    J = det3(Ft)
    vol_term = lam * (J - 1.0) * J
    two_mu = 2.0 * mu
    for i in range(3):
        d0 = Ft[i, 0] - R[i, 0]
        d1 = Ft[i, 1] - R[i, 1]
        d2 = Ft[i, 2] - R[i, 2]
        for j in range(3):
            tau[i, j] = two_mu * (d0 * Ft[j, 0] + d1 * Ft[j, 1] + d2 * Ft[j, 2])
        tau[i, i] += vol_term
    return projected


@njit(cache=True, nogil=True)
def kirchhoff_stress(F, mat, prm, tau_out):
    """Kirchhoff stress P(F) F^T after the material projection (testing aid)."""
    Ft = np.empty((3, 3))
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    sig = np.empty(3)
    g = np.empty(3)
    dg = np.empty(3)
    _project_and_stress(F, mat, prm, Ft, tau_out, U, sig, V, g, dg, np.empty((3, 3)), False)
    return Ft


@njit(cache=True, nogil=True)
def p2g(x, v, C, F, mass, vol, mat, prm, iprm, gm, gmv, mark, active, F_out):
    """Scatter particles to the grid. Returns (status, particle, n_active)."""
    e33 = np.empty((0, 3, 3))
    e3 = np.empty((0, 3))
    return p2g_store(x, v, C, F, mass, vol, mat, prm, iprm, gm, gmv, mark, active, F_out,
                     False, e33, e33, e33, e33, e3, e3, e3, np.empty(0, np.int64))


@njit(cache=True, nogil=True)
def p2g_store(x, v, C, F, mass, vol, mat, prm, iprm, gm, gmv, mark, active, F_out, store,
              sFn, sU, sV, stau, ssig, sg, sdg, sproj):
    """p2g that optionally keeps the per-particle updated F, SVD factors,
    projected singular values and stress for the adjoint."""
    n = x.shape[0]
    dt = prm[0]
    inv_dx = 1.0 / prm[1]
    dx = prm[1]
    k_stress = 4.0 * dt * inv_dx * inv_dx
    ny = iprm[1]
    nz = iprm[2]
    dims = iprm[:3]
    base = np.empty(3, np.int64)
    fx = np.empty(3)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    Fn = np.empty((3, 3))
    Ft = np.empty((3, 3))
    tau = np.empty((3, 3))
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    sig = np.empty(3)
    g = np.empty(3)
    dg = np.empty(3)
    A = np.empty((3, 3))
    Rm = np.empty((3, 3))
    n_active = 0
    for p in range(n):
        if not _stencil(x[p], inv_dx, dims, base, fx, w, dw):
            return DOMAIN_ESCAPE, p, n_active
        finite = True
        for i in range(3):
            for j in range(3):
                Fn[i, j] = F[p, i, j] + dt * (C[p, i, 0] * F[p, 0, j] + C[p, i, 1] * F[p, 1, j]
                                              + C[p, i, 2] * F[p, 2, j])
                if not np.isfinite(Fn[i, j]):
                    finite = False
        if not finite:
            return NON_FINITE, p, n_active
        proj = _project_and_stress(Fn, mat[p], prm, Ft, tau, U, sig, V, g, dg, Rm, store)
        mp = mass[p]
        kv = k_stress * vol[p]
        for i in range(3):
            for j in range(3):
                F_out[p, i, j] = Ft[i, j]
                A[i, j] = mp * C[p, i, j] - kv * tau[i, j]
        if store:
            sFn[p] = Fn
            sU[p] = U
            sV[p] = V
            stau[p] = tau
            ssig[p] = sig
            sg[p] = g
            sdg[p] = dg
            sproj[p] = proj
        mvx = mp * v[p, 0]
        mvy = mp * v[p, 1]
        mvz = mp * v[p, 2]
        for a in range(3):
            dpx = (a - fx[0]) * dx
            for b in range(3):
                dpy = (b - fx[1]) * dx
                wab = w[0, a] * w[1, b]
                for c in range(3):
                    dpz = (c - fx[2]) * dx
                    wt = wab * w[2, c]
                    idx = ((base[0] + a) * ny + (base[1] + b)) * nz + (base[2] + c)
                    if mark[idx] == 0:
                        mark[idx] = 1
                        active[n_active] = idx
                        n_active += 1
                    gm[idx] += wt * mp
                    gmv[idx, 0] += wt * (mvx + A[0, 0] * dpx + A[0, 1] * dpy + A[0, 2] * dpz)
                    gmv[idx, 1] += wt * (mvy + A[1, 0] * dpx + A[1, 1] * dpy + A[1, 2] * dpz)
                    gmv[idx, 2] += wt * (mvz + A[2, 0] * dpx + A[2, 1] * dpy + A[2, 2] * dpz)
    return OK, -1, n_active


@njit(cache=True, nogil=True, inline="always")
def _coulomb(vx, vy, vz, nx, ny, nz, mu):
    """Remove inflow along the outward surface normal n; friction-limit the tangent."""
    vn = vx * nx + vy * ny + vz * nz
    if vn >= 0.0:
        return vx, vy, vz
    tx = vx - vn * nx
    ty = vy - vn * ny
    tz = vz - vn * nz
    t = math.sqrt(tx * tx + ty * ty + tz * tz)
    if t + mu * vn <= 0.0:
        return 0.0, 0.0, 0.0
    s = 1.0 + mu * vn / t
    return s * tx, s * ty, s * tz


@njit(cache=True, nogil=True, inline="always")
def _coulomb_adjoint(vx, vy, vz, nx, ny, nz, mu, ox, oy, oz):
    """Adjoint of _coulomb: returns (vbar, nbar, mubar) as seven scalars."""
    vn = vx * nx + vy * ny + vz * nz
    if vn >= 0.0:
        return ox, oy, oz, 0.0, 0.0, 0.0, 0.0
    tx = vx - vn * nx
    ty = vy - vn * ny
    tz = vz - vn * nz
    t = math.sqrt(tx * tx + ty * ty + tz * tz)
    if t + mu * vn <= 0.0:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    s = 1.0 + mu * vn / t
    sbar = ox * tx + oy * ty + oz * tz
    mubar = sbar * vn / t
    vnbar = sbar * mu / t
    tbar = -sbar * mu * vn / (t * t)
    btx = s * ox + tbar * tx / t
    bty = s * oy + tbar * ty / t
    btz = s * oz + tbar * tz / t
    vnbar -= btx * nx + bty * ny + btz * nz
    return (btx + vnbar * nx, bty + vnbar * ny, btz + vnbar * nz,
            -vn * btx + vnbar * vx, -vn * bty + vnbar * vy, -vn * btz + vnbar * vz, mubar)


@njit(cache=True, nogil=True, inline="always")
def _box_frame(x0, x1, x2, c, R, h):
    """Offset r = x - c, local coords l = R^T r, depth d (< 0 inside) and face axis."""
    r0 = x0 - c[0]
    r1 = x1 - c[1]
    r2 = x2 - c[2]
    l0 = R[0, 0] * r0 + R[1, 0] * r1 + R[2, 0] * r2
    l1 = R[0, 1] * r0 + R[1, 1] * r1 + R[2, 1] * r2
    l2 = R[0, 2] * r0 + R[1, 2] * r1 + R[2, 2] * r2
    d = abs(l0) - h[0]
    k = 0
    q = abs(l1) - h[1]
    if q > d:
        d = q
        k = 1
    q = abs(l2) - h[2]
    if q > d:
        d = q
        k = 2
    if k == 0:
        lk = l0
    elif k == 1:
        lk = l1
    else:
        lk = l2
    return r0, r1, r2, lk, d, k


@njit(cache=True, nogil=True)
def _box_contact(vx, vy, vz, x0, x1, x2, c, R, h, bv, bw, bp, mu, band):
    """Impose a kinematic box on a node velocity (smoothstep blend over a thin band)."""
    r0, r1, r2, lk, d, k = _box_frame(x0, x1, x2, c, R, h)
    if d >= 0.0:
        return vx, vy, vz
    s = -d / band
    if s > 1.0:
        s = 1.0
    phi = s * s * (3.0 - 2.0 * s)
    sg = 1.0 if lk >= 0.0 else -1.0
    nx = sg * R[0, k]
    ny = sg * R[1, k]
    nz = sg * R[2, k]
    o0 = x0 - bp[0]
    o1 = x1 - bp[1]
    o2 = x2 - bp[2]
    ux = bv[0] + bw[1] * o2 - bw[2] * o1
    uy = bv[1] + bw[2] * o0 - bw[0] * o2
    uz = bv[2] + bw[0] * o1 - bw[1] * o0
    wx = vx - ux
    wy = vy - uy
    wz = vz - uz
    px, py, pz = _coulomb(wx, wy, wz, nx, ny, nz, mu)
    return vx + phi * (px - wx), vy + phi * (py - wy), vz + phi * (pz - wz)


@njit(cache=True, nogil=True)
def _box_contact_adjoint(vx, vy, vz, x0, x1, x2, c, R, h, bv, bw, bp, mu, band,
                         ox, oy, oz, cbar, Rbar, bvbar, bwbar, bpbar):
    """Adjoint of _box_contact.  Accumulates box adjoints; returns (vbar, mubar)."""
    r0, r1, r2, lk, d, k = _box_frame(x0, x1, x2, c, R, h)
    if d >= 0.0:
        return ox, oy, oz, 0.0
    s = -d / band
    inner = s < 1.0
    if not inner:
        s = 1.0
    phi = s * s * (3.0 - 2.0 * s)
    sg = 1.0 if lk >= 0.0 else -1.0
    nx = sg * R[0, k]
    ny = sg * R[1, k]
    nz = sg * R[2, k]
    o0 = x0 - bp[0]
    o1 = x1 - bp[1]
    o2 = x2 - bp[2]
    ux = bv[0] + bw[1] * o2 - bw[2] * o1
    uy = bv[1] + bw[2] * o0 - bw[0] * o2
    uz = bv[2] + bw[0] * o1 - bw[1] * o0
    wx = vx - ux
    wy = vy - uy
    wz = vz - uz
    px, py, pz = _coulomb(wx, wy, wz, nx, ny, nz, mu)
    phibar = ox * (px - wx) + oy * (py - wy) + oz * (pz - wz)
    dx_ = phi * ox
    dy_ = phi * oy
    dz_ = phi * oz
    wbx, wby, wbz, nbx, nby, nbz, mubar = _coulomb_adjoint(wx, wy, wz, nx, ny, nz, mu,
                                                           dx_, dy_, dz_)
    wbx -= dx_
    wby -= dy_
    wbz -= dz_
    # u = bv + bw x o; ubar = -wbar
    ux_, uy_, uz_ = -wbx, -wby, -wbz
    bvbar[0] += ux_
    bvbar[1] += uy_
    bvbar[2] += uz_
    bwbar[0] += o1 * uz_ - o2 * uy_
    bwbar[1] += o2 * ux_ - o0 * uz_
    bwbar[2] += o0 * uy_ - o1 * ux_
    bpbar[0] += bw[1] * uz_ - bw[2] * uy_
    bpbar[1] += bw[2] * ux_ - bw[0] * uz_
    bpbar[2] += bw[0] * uy_ - bw[1] * ux_
    Rbar[0, k] += sg * nbx
    Rbar[1, k] += sg * nby
    Rbar[2, k] += sg * nbz
    if inner:
        dbar = -phibar * 6.0 * s * (1.0 - s) / band
        lbar = dbar * sg
        # l_k = R[:, k] . r,  r = x - c
        Rbar[0, k] += r0 * lbar
        Rbar[1, k] += r1 * lbar
        Rbar[2, k] += r2 * lbar
        cbar[0] -= R[0, k] * lbar
        cbar[1] -= R[1, k] * lbar
        cbar[2] -= R[2, k] * lbar
    return ox + wbx, oy + wby, oz + wbz, mubar


@njit(cache=True, nogil=True, inline="always")
def _wall_normal(node, dim, margin, va):
    """Outward wall normal sign along one axis, or 0 when the wall is inactive."""
    if node < margin and va < 0.0:
        return 1.0
    if node >= dim - margin and va > 0.0:
        return -1.0
    return 0.0


@njit(cache=True, nogil=True, inline="always")
def _node_coords(idx, ny, nz):
    return idx // (ny * nz), (idx // nz) % ny, idx % nz


@njit(cache=True, nogil=True)
def _boxes_forward(vx, vy, vz, x0, x1, x2, prm, bc, bR, bh, bv, bw, bp, s, upto):
    """Apply boxes 0..upto-1 in order."""
    for b in range(upto):
        vx, vy, vz = _box_contact(vx, vy, vz, x0, x1, x2, bc[s, b], bR[s, b], bh[b],
                                  bv[s, b], bw[s, b], bp[s, b], prm[8], prm[10])
    return vx, vy, vz


@njit(cache=True, nogil=True)
def _walls(vx, vy, vz, i0, i1, i2, iprm, mu):
    """Sequential x, y, z wall projections at the grid boundary."""
    margin = iprm[3]
    sg = _wall_normal(i0, iprm[0], margin, vx)
    if sg != 0.0:
        vx, vy, vz = _coulomb(vx, vy, vz, sg, 0.0, 0.0, mu)
    sg = _wall_normal(i1, iprm[1], margin, vy)
    if sg != 0.0:
        vx, vy, vz = _coulomb(vx, vy, vz, 0.0, sg, 0.0, mu)
    sg = _wall_normal(i2, iprm[2], margin, vz)
    if sg != 0.0:
        vx, vy, vz = _coulomb(vx, vy, vz, 0.0, 0.0, sg, mu)
    return vx, vy, vz


@njit(cache=True, nogil=True)
def grid_update(gm, gmv, gv, active, n_active, prm, iprm, bc, bR, bh, bv, bw, bp, s):
    """Normalise momenta, add gravity, then effector boxes (in order) and walls."""
    nb = bh.shape[0]
    ny = iprm[1]
    nz = iprm[2]
    dx = prm[1]
    dt = prm[0]
    for a in range(n_active):
        idx = active[a]
        m = gm[idx]
        if m <= 0.0:
            gv[idx, 0], gv[idx, 1], gv[idx, 2] = 0.0, 0.0, 0.0
            continue
        i0, i1, i2 = _node_coords(idx, ny, nz)
        vx = gmv[idx, 0] / m + dt * prm[2]
        vy = gmv[idx, 1] / m + dt * prm[3]
        vz = gmv[idx, 2] / m + dt * prm[4]
        if nb > 0:
            vx, vy, vz = _boxes_forward(vx, vy, vz, i0 * dx, i1 * dx, i2 * dx, prm, bc, bR, bh,
                                        bv, bw, bp, s, nb)
        vx, vy, vz = _walls(vx, vy, vz, i0, i1, i2, iprm, prm[8])
        gv[idx, 0] = vx
        gv[idx, 1] = vy
        gv[idx, 2] = vz


@njit(cache=True, nogil=True)
def g2p(x, gv, prm, iprm, x_out, v_out, C_out):
    """Gather grid velocities. Returns (status, particle)."""
    n = x.shape[0]
    dt = prm[0]
    dx = prm[1]
    inv_dx = 1.0 / dx
    cscale = 4.0 * inv_dx * inv_dx
    ny = iprm[1]
    nz = iprm[2]
    dims = iprm[:3]
    cfl = 0.5 * dx
    base = np.empty(3, np.int64)
    fx = np.empty(3)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    status = OK
    bad = -1
    for p in range(n):
        if not _stencil(x[p], inv_dx, dims, base, fx, w, dw):
            return DOMAIN_ESCAPE, p
        vx = 0.0
        vy = 0.0
        vz = 0.0
        B00 = B01 = B02 = B10 = B11 = B12 = B20 = B21 = B22 = 0.0
        for a in range(3):
            dpx = (a - fx[0]) * dx
            for b in range(3):
                dpy = (b - fx[1]) * dx
                wab = w[0, a] * w[1, b]
                for c in range(3):
                    dpz = (c - fx[2]) * dx
                    wt = wab * w[2, c]
                    idx = ((base[0] + a) * ny + (base[1] + b)) * nz + (base[2] + c)
                    gx = wt * gv[idx, 0]
                    gy = wt * gv[idx, 1]
                    gz = wt * gv[idx, 2]
                    vx += gx
                    vy += gy
                    vz += gz
                    B00 += gx * dpx
                    B01 += gx * dpy
                    B02 += gx * dpz
                    B10 += gy * dpx
                    B11 += gy * dpy
                    B12 += gy * dpz
                    B20 += gz * dpx
                    B21 += gz * dpy
                    B22 += gz * dpz
        v_out[p, 0] = vx
        v_out[p, 1] = vy
        v_out[p, 2] = vz
        C_out[p, 0, 0] = cscale * B00
        C_out[p, 0, 1] = cscale * B01
        C_out[p, 0, 2] = cscale * B02
        C_out[p, 1, 0] = cscale * B10
        C_out[p, 1, 1] = cscale * B11
        C_out[p, 1, 2] = cscale * B12
        C_out[p, 2, 0] = cscale * B20
        C_out[p, 2, 1] = cscale * B21
        C_out[p, 2, 2] = cscale * B22
        x_out[p, 0] = x[p, 0] + dt * vx
        x_out[p, 1] = x[p, 1] + dt * vy
        x_out[p, 2] = x[p, 2] + dt * vz
        speed = math.sqrt(vx * vx + vy * vy + vz * vz)
        if status == OK:
            if not (np.isfinite(speed)):
                status = NON_FINITE
                bad = p
            elif dt * speed > cfl:
                status = CFL_VIOLATION
                bad = p
    if status != OK:
        return status, bad
    for p in range(n):
        for a in range(3):
            s = x_out[p, a] * inv_dx
            if not (s >= 1.0 and s <= dims[a] - 2.0):
                return DOMAIN_ESCAPE, p
    return OK, -1


@njit(cache=True, nogil=True)
def reset_grid(gm, gmv, gv, mark, active, n_active):
    for a in range(n_active):
        idx = active[a]
        gm[idx] = 0.0
        mark[idx] = 0
        for c in range(3):
            gmv[idx, c] = 0.0
            gv[idx, c] = 0.0


@njit(cache=True, nogil=True)
def advance(x, v, C, F, mass, vol, mat, prm, iprm, bc, bR, bh, bv, bw, bp,
            gm, gmv, gv, mark, active, record, ck_x, ck_v, ck_C, ck_F):
    """Run all substeps of one action in place. Returns (status, substep, particle)."""
    S = bc.shape[0]
    F_new = np.empty_like(F)
    for s in range(S):
        if record:
            ck_x[s] = x
            ck_v[s] = v
            ck_C[s] = C
            ck_F[s] = F
        status, bad, n_active = p2g(x, v, C, F, mass, vol, mat, prm, iprm, gm, gmv, mark,
                                    active, F_new)
        if status != OK:
            reset_grid(gm, gmv, gv, mark, active, n_active)
            return status, s, bad
        grid_update(gm, gmv, gv, active, n_active, prm, iprm, bc, bR, bh, bv, bw, bp, s)
        status, bad = g2p(x, gv, prm, iprm, x, v, C)
        reset_grid(gm, gmv, gv, mark, active, n_active)
        F[:] = F_new
        if status != OK:
            return status, s, bad
    return OK, -1, -1


# ----------------------------------------------------------------------------
# adjoint
# ----------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def g2p_adjoint(x, gv, prm, iprm, xbar_out, vbar_out, Cbar_out, gv_bar, xbar_in):
    """Adjoint of g2p.

    ``xbar_out, vbar_out, Cbar_out`` are adjoints of the substep outputs;
    grid velocity adjoints are scattered into ``gv_bar`` and the position
    adjoint of the inputs (weights, offsets, x passthrough) into ``xbar_in``.
    """
    n = x.shape[0]
    dt = prm[0]
    dx = prm[1]
    inv_dx = 1.0 / dx
    cscale = 4.0 * inv_dx * inv_dx
    ny = iprm[1]
    nz = iprm[2]
    dims = iprm[:3]
    base = np.empty(3, np.int64)
    fx = np.empty(3)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    for p in range(n):
        _stencil(x[p], inv_dx, dims, base, fx, w, dw)
        vtx = vbar_out[p, 0] + dt * xbar_out[p, 0]
        vty = vbar_out[p, 1] + dt * xbar_out[p, 1]
        vtz = vbar_out[p, 2] + dt * xbar_out[p, 2]
        Cb = Cbar_out[p]
        ax = xbar_out[p, 0]
        ay = xbar_out[p, 1]
        az = xbar_out[p, 2]
        for a in range(3):
            dpx = (a - fx[0]) * dx
            for b in range(3):
                dpy = (b - fx[1]) * dx
                for c in range(3):
                    dpz = (c - fx[2]) * dx
                    wt = w[0, a] * w[1, b] * w[2, c]
                    idx = ((base[0] + a) * ny + (base[1] + b)) * nz + (base[2] + c)
                    g0 = gv[idx, 0]
                    g1 = gv[idx, 1]
                    g2 = gv[idx, 2]
                    # Cbar @ dpos
                    cd0 = Cb[0, 0] * dpx + Cb[0, 1] * dpy + Cb[0, 2] * dpz
                    cd1 = Cb[1, 0] * dpx + Cb[1, 1] * dpy + Cb[1, 2] * dpz
                    cd2 = Cb[2, 0] * dpx + Cb[2, 1] * dpy + Cb[2, 2] * dpz
                    gv_bar[idx, 0] += wt * (vtx + cscale * cd0)
                    gv_bar[idx, 1] += wt * (vty + cscale * cd1)
                    gv_bar[idx, 2] += wt * (vtz + cscale * cd2)
                    wbar = g0 * (vtx + cscale * cd0) + g1 * (vty + cscale * cd1) \
                        + g2 * (vtz + cscale * cd2)
                    # dpos adjoint: cscale * w * Cbar^T g ; dpos = x_i - x_p
                    sw = cscale * wt
                    dp0 = sw * (Cb[0, 0] * g0 + Cb[1, 0] * g1 + Cb[2, 0] * g2)
                    dp1 = sw * (Cb[0, 1] * g0 + Cb[1, 1] * g1 + Cb[2, 1] * g2)
                    dp2 = sw * (Cb[0, 2] * g0 + Cb[1, 2] * g1 + Cb[2, 2] * g2)
                    ax += wbar * dw[0, a] * w[1, b] * w[2, c] - dp0
                    ay += wbar * w[0, a] * dw[1, b] * w[2, c] - dp1
                    az += wbar * w[0, a] * w[1, b] * dw[2, c] - dp2
        xbar_in[p, 0] = ax
        xbar_in[p, 1] = ay
        xbar_in[p, 2] = az


@njit(cache=True, nogil=True)
def grid_adjoint(gm, gmv, gv_bar, active, n_active, prm, iprm, bc, bR, bh, bv, bw, bp, s,
                 gmv_bar, gm_bar, bc_bar, bR_bar, bv_bar, bw_bar, bp_bar):
    """Adjoint of grid_update for substep s. Returns d/d friction."""
    nb = bh.shape[0]
    ny = iprm[1]
    nz = iprm[2]
    margin = iprm[3]
    mu = prm[8]
    dx = prm[1]
    dt = prm[0]
    mubar = 0.0
    for q in range(n_active):
        idx = active[q]
        m = gm[idx]
        if m <= 0.0:
            continue
        ox = gv_bar[idx, 0]
        oy = gv_bar[idx, 1]
        oz = gv_bar[idx, 2]
        if ox == 0.0 and oy == 0.0 and oz == 0.0:
            continue
        i0, i1, i2 = _node_coords(idx, ny, nz)
        x0 = i0 * dx
        x1 = i1 * dx
        x2 = i2 * dx
        hx = gmv[idx, 0] / m
        hy = gmv[idx, 1] / m
        hz = gmv[idx, 2] / m
        vx = hx + dt * prm[2]
        vy = hy + dt * prm[3]
        vz = hz + dt * prm[4]
        if nb > 0:
            vx, vy, vz = _boxes_forward(vx, vy, vz, x0, x1, x2, prm, bc, bR, bh, bv, bw, bp,
                                        s, nb)
        # walls, replayed axis by axis
        s0 = _wall_normal(i0, iprm[0], margin, vx)
        ax, ay, az = vx, vy, vz
        if s0 != 0.0:
            vx, vy, vz = _coulomb(vx, vy, vz, s0, 0.0, 0.0, mu)
        s1 = _wall_normal(i1, iprm[1], margin, vy)
        bx, by, bz = vx, vy, vz
        if s1 != 0.0:
            vx, vy, vz = _coulomb(vx, vy, vz, 0.0, s1, 0.0, mu)
        s2 = _wall_normal(i2, iprm[2], margin, vz)
        if s2 != 0.0:
            ox, oy, oz, _, _, _, mb = _coulomb_adjoint(vx, vy, vz, 0.0, 0.0, s2, mu, ox, oy, oz)
            mubar += mb
        if s1 != 0.0:
            ox, oy, oz, _, _, _, mb = _coulomb_adjoint(bx, by, bz, 0.0, s1, 0.0, mu, ox, oy, oz)
            mubar += mb
        if s0 != 0.0:
            ox, oy, oz, _, _, _, mb = _coulomb_adjoint(ax, ay, az, s0, 0.0, 0.0, mu, ox, oy, oz)
            mubar += mb
        for b in range(nb - 1, -1, -1):
            # input velocity of box b: replay boxes 0..b-1
            wx, wy, wz = _boxes_forward(hx + dt * prm[2], hy + dt * prm[3], hz + dt * prm[4],
                                        x0, x1, x2, prm, bc, bR, bh, bv, bw, bp, s, b)
            ox, oy, oz, mb = _box_contact_adjoint(wx, wy, wz, x0, x1, x2, bc[s, b], bR[s, b],
                                                  bh[b], bv[s, b], bw[s, b], bp[s, b], mu,
                                                  prm[10], ox, oy, oz, bc_bar[s, b],
                                                  bR_bar[s, b], bv_bar[s, b], bw_bar[s, b],
                                                  bp_bar[s, b])
            mubar += mb
        gmv_bar[idx, 0] = ox / m
        gmv_bar[idx, 1] = oy / m
        gmv_bar[idx, 2] = oz / m
        gm_bar[idx] = -(ox * hx + oy * hy + oz * hz) / m
    return mubar


@njit(cache=True, nogil=True)
def _stress_adjoint(Ft, U, sig_t, V, prm, taubar, Fbar, pbar, work):
    """Adds d/dFt of <taubar, tau(Ft)> to Fbar and Lame adjoints to pbar[0:2].

    ``work`` is (>= 7, 3, 3) scratch.
    """
    mu = prm[5]
    lam = prm[6]
    R = work[3]
    D = work[4]
    TF = work[5]
    cof = work[6]
    matmul3_nt(U, V, R)
    J = det3(Ft)
    for i in range(3):
        for j in range(3):
            D[i, j] = Ft[i, j] - R[i, j]
    tr = taubar[0, 0] + taubar[1, 1] + taubar[2, 2]
    acc = 0.0
    for i in range(3):
        for j in range(3):
            acc += taubar[i, j] * (D[i, 0] * Ft[j, 0] + D[i, 1] * Ft[j, 1] + D[i, 2] * Ft[j, 2])
    pbar[0] += 2.0 * acc
    pbar[1] += (J - 1.0) * J * tr
    matmul3(taubar, Ft, TF)
    cofactor3(Ft, cof)
    vol_coef = lam * (2.0 * J - 1.0) * tr
    two_mu = 2.0 * mu
    for i in range(3):
        for j in range(3):
            ttd = taubar[0, i] * D[0, j] + taubar[1, i] * D[1, j] + taubar[2, i] * D[2, j]
            Fbar[i, j] += two_mu * (TF[i, j] + ttd) + vol_coef * cof[i, j]
            TF[i, j] = -two_mu * TF[i, j]
    polar_rotation_adjoint(R, sig_t, V, TF, Fbar, work)


@njit(cache=True, nogil=True)
def p2g_adjoint(x, v, C, F, mass, vol, mat, prm, iprm, gmv_bar, gm_bar, Fbar_out,
                xbar_in, vbar_in, Cbar_in, Fbar_in, pbar, F_new, sFn, sU, sV, stau, ssig, sg,
                sdg, sproj):
    """Adjoint of p2g (including the F update and material projection).

    Reads the forward quantities stored by ``p2g(..., store=True)`` and the
    projected F in ``F_new``.  Adds to xbar_in; overwrites vbar_in, Cbar_in,
    Fbar_in.  pbar[0], pbar[1] accumulate the Lame mu / lambda adjoints.
    """
    n = x.shape[0]
    dt = prm[0]
    dx = prm[1]
    inv_dx = 1.0 / dx
    k_stress = 4.0 * dt * inv_dx * inv_dx
    ny = iprm[1]
    nz = iprm[2]
    dims = iprm[:3]
    base = np.empty(3, np.int64)
    fx = np.empty(3)
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    A = np.empty((3, 3))
    Abar = np.empty((3, 3))
    taubar = np.empty((3, 3))
    Ftbar = np.empty((3, 3))
    Fnbar = np.empty((3, 3))
    cof = np.empty((3, 3))
    work = np.empty((7, 3, 3))
    for p in range(n):
        _stencil(x[p], inv_dx, dims, base, fx, w, dw)
        Fn = sFn[p]
        Ft = F_new[p]
        tau = stau[p]
        U = sU[p]
        V = sV[p]
        sig = ssig[p]
        g = sg[p]
        dg = sdg[p]
        projected = sproj[p]
        mp = mass[p]
        kv = k_stress * vol[p]
        for i in range(3):
            for j in range(3):
                A[i, j] = mp * C[p, i, j] - kv * tau[i, j]
                Abar[i, j] = 0.0
        vb0 = 0.0
        vb1 = 0.0
        vb2 = 0.0
        ax = 0.0
        ay = 0.0
        az = 0.0
        mv0 = mp * v[p, 0]
        mv1 = mp * v[p, 1]
        mv2 = mp * v[p, 2]
        for a in range(3):
            dpx = (a - fx[0]) * dx
            for b in range(3):
                dpy = (b - fx[1]) * dx
                for c in range(3):
                    dpz = (c - fx[2]) * dx
                    wt = w[0, a] * w[1, b] * w[2, c]
                    idx = ((base[0] + a) * ny + (base[1] + b)) * nz + (base[2] + c)
                    m0 = gmv_bar[idx, 0]
                    m1 = gmv_bar[idx, 1]
                    m2 = gmv_bar[idx, 2]
                    c0 = mv0 + A[0, 0] * dpx + A[0, 1] * dpy + A[0, 2] * dpz
                    c1 = mv1 + A[1, 0] * dpx + A[1, 1] * dpy + A[1, 2] * dpz
                    c2 = mv2 + A[2, 0] * dpx + A[2, 1] * dpy + A[2, 2] * dpz
                    wbar = m0 * c0 + m1 * c1 + m2 * c2 + gm_bar[idx] * mp
                    vb0 += wt * mp * m0
                    vb1 += wt * mp * m1
                    vb2 += wt * mp * m2
                    Abar[0, 0] += wt * m0 * dpx
                    Abar[0, 1] += wt * m0 * dpy
                    Abar[0, 2] += wt * m0 * dpz
                    Abar[1, 0] += wt * m1 * dpx
                    Abar[1, 1] += wt * m1 * dpy
                    Abar[1, 2] += wt * m1 * dpz
                    Abar[2, 0] += wt * m2 * dpx
                    Abar[2, 1] += wt * m2 * dpy
                    Abar[2, 2] += wt * m2 * dpz
                    dp0 = wt * (A[0, 0] * m0 + A[1, 0] * m1 + A[2, 0] * m2)
                    dp1 = wt * (A[0, 1] * m0 + A[1, 1] * m1 + A[2, 1] * m2)
                    dp2 = wt * (A[0, 2] * m0 + A[1, 2] * m1 + A[2, 2] * m2)
                    ax += wbar * dw[0, a] * w[1, b] * w[2, c] - dp0
                    ay += wbar * w[0, a] * dw[1, b] * w[2, c] - dp1
                    az += wbar * w[0, a] * w[1, b] * dw[2, c] - dp2
        xbar_in[p, 0] += ax
        xbar_in[p, 1] += ay
        xbar_in[p, 2] += az
        vbar_in[p, 0] = vb0
        vbar_in[p, 1] = vb1
        vbar_in[p, 2] = vb2
        for i in range(3):
            for j in range(3):
                taubar[i, j] = -kv * Abar[i, j]
                Ftbar[i, j] = Fbar_out[p, i, j]
        if mat[p] == FLUID:
            J = det3(Fn)
            floor_ = prm[11]
            if J > floor_:
                Jbar = -prm[7] * (taubar[0, 0] + taubar[1, 1] + taubar[2, 2])
                Jbar += (Ftbar[0, 0] + Ftbar[1, 1] + Ftbar[2, 2]) / (3.0 * np.cbrt(J) ** 2)
                cofactor3(Fn, cof)
                for i in range(3):
                    for j in range(3):
                        Fnbar[i, j] = Jbar * cof[i, j]
            else:
                Fnbar[:, :] = 0.0
        else:
            _stress_adjoint(Ft, U, g, V, prm, taubar, Ftbar, pbar, work)
            if projected:
                isotropic_adjoint(U, sig, g, dg, V, Ftbar, Fnbar, work)
            else:
                for i in range(3):
                    for j in range(3):
                        Fnbar[i, j] = Ftbar[i, j]
        # Fn = (I + dt C) F
        for i in range(3):
            for j in range(3):
                Cbar_in[p, i, j] = mp * Abar[i, j] + dt * (Fnbar[i, 0] * F[p, j, 0]
                                                           + Fnbar[i, 1] * F[p, j, 1]
                                                           + Fnbar[i, 2] * F[p, j, 2])
        for i in range(3):
            for j in range(3):
                acc = Fnbar[i, j]
                for k in range(3):
                    acc += dt * C[p, k, i] * Fnbar[k, j]
                Fbar_in[p, i, j] = acc


@njit(cache=True, nogil=True)
def reset_adjoint(gv_bar, gmv_bar, gm_bar, active, n_active):
    for a in range(n_active):
        idx = active[a]
        gm_bar[idx] = 0.0
        for c in range(3):
            gv_bar[idx, c] = 0.0
            gmv_bar[idx, c] = 0.0


@njit(cache=True, nogil=True)
def reverse(ck_x, ck_v, ck_C, ck_F, mass, vol, mat, prm, iprm, bc, bR, bh, bv, bw, bp,
            gm, gmv, gv, mark, active, gv_bar, gmv_bar, gm_bar,
            xbar, vbar, Cbar, Fbar, pbar, bc_bar, bR_bar, bv_bar, bw_bar, bp_bar):
    """Back-propagate through all substeps of one action.

    On entry ``xbar, vbar, Cbar, Fbar`` hold adjoints of the post-action state;
    on exit they hold adjoints of the pre-action state.  pbar[0:3] accumulate
    Lame mu, Lame lambda and friction adjoints.  Returns -1, or the first
    substep (in reverse order) whose adjoint is not finite.
    """
    S = bc.shape[0]
    n = ck_x.shape[1]
    F_new = np.empty((n, 3, 3))
    sFn = np.empty((n, 3, 3))
    sU = np.empty((n, 3, 3))
    sV = np.empty((n, 3, 3))
    stau = np.empty((n, 3, 3))
    ssig = np.empty((n, 3))
    sg = np.empty((n, 3))
    sdg = np.empty((n, 3))
    sproj = np.empty(n, np.int64)
    xb_in = np.empty((n, 3))
    vb_in = np.empty((n, 3))
    Cb_in = np.empty((n, 3, 3))
    Fb_in = np.empty((n, 3, 3))
    for s in range(S - 1, -1, -1):
        x = ck_x[s]
        v = ck_v[s]
        C = ck_C[s]
        F = ck_F[s]
        status, bad, n_active = p2g_store(x, v, C, F, mass, vol, mat, prm, iprm, gm, gmv,
                                          mark, active, F_new, True, sFn, sU, sV, stau, ssig, sg, sdg,
                                    sproj)
        grid_update(gm, gmv, gv, active, n_active, prm, iprm, bc, bR, bh, bv, bw, bp, s)
        g2p_adjoint(x, gv, prm, iprm, xbar, vbar, Cbar, gv_bar, xb_in)
        pbar[2] += grid_adjoint(gm, gmv, gv_bar, active, n_active, prm, iprm, bc, bR, bh,
                                bv, bw, bp, s, gmv_bar, gm_bar, bc_bar, bR_bar, bv_bar,
                                bw_bar, bp_bar)
        p2g_adjoint(x, v, C, F, mass, vol, mat, prm, iprm, gmv_bar, gm_bar, Fbar,
                    xb_in, vb_in, Cb_in, Fb_in, pbar, F_new, sFn, sU, sV, stau, ssig, sg,
                    sdg, sproj)
        reset_adjoint(gv_bar, gmv_bar, gm_bar, active, n_active)
        reset_grid(gm, gmv, gv, mark, active, n_active)
        xbar[:] = xb_in
        vbar[:] = vb_in
        Cbar[:] = Cb_in
        Fbar[:] = Fb_in
        if not (np.isfinite(xbar).all() and np.isfinite(vbar).all()
                and np.isfinite(Cbar).all() and np.isfinite(Fbar).all()):
            return s
    return -1
