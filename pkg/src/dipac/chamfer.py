"""Chamfer distance with an exact uniform-grid nearest-neighbour search.

The hash only prunes candidates; every distance is evaluated with the same
expression as the all-pairs loop and ties go to the lowest index, so results
are bitwise identical to brute force.
"""
import numpy as np
from numba import njit

from .core import ParticleState, ValidationError


@njit(cache=True, nogil=True)
def _build(Q, target):
    n = Q.shape[0]
    lo = np.empty(3)
    hi = np.empty(3)
    for a in range(3):
        lo[a] = Q[0, a]
        hi[a] = Q[0, a]
    for j in range(n):
        for a in range(3):
            if Q[j, a] < lo[a]:
                lo[a] = Q[j, a]
            if Q[j, a] > hi[a]:
                hi[a] = Q[j, a]
    ext = 0.0
    for a in range(3):
        e = hi[a] - lo[a]
        if e > ext:
            ext = e
    # roughly `target` points per cell, never more than ~4n cells
    vol = 1.0
    nz_axes = 0
    for a in range(3):
        e = hi[a] - lo[a]
        if e > 1e-12 * (ext + 1e-300):
            vol *= e
            nz_axes += 1
    if ext == 0.0:
        h = 1.0
    else:
        h = (vol * target / n) ** (1.0 / max(nz_axes, 1))
        if h <= 0.0 or not np.isfinite(h):
            h = ext
        h = max(h, ext / 256.0)
    dims = np.empty(3, np.int64)
    for a in range(3):
        dims[a] = int((hi[a] - lo[a]) / h) + 1
    ncell = dims[0] * dims[1] * dims[2]
    cell = np.empty(n, np.int64)
    count = np.zeros(ncell + 1, np.int64)
    for j in range(n):
        c0 = min(int((Q[j, 0] - lo[0]) / h), dims[0] - 1)
        c1 = min(int((Q[j, 1] - lo[1]) / h), dims[1] - 1)
        c2 = min(int((Q[j, 2] - lo[2]) / h), dims[2] - 1)
        c = (c0 * dims[1] + c1) * dims[2] + c2
        cell[j] = c
        count[c + 1] += 1
    for c in range(ncell):
        count[c + 1] += count[c]
    order = np.empty(n, np.int64)
    fill = count[:-1].copy()
    for j in range(n):  # stable: indices within a cell stay ascending
        order[fill[cell[j]]] = j
        fill[cell[j]] += 1
    return lo, h, dims, count, order


@njit(cache=True, nogil=True)
def nearest(P, Q):
    """For each row of P, squared distance to and index of its nearest Q row."""
    n = P.shape[0]
    lo, h, dims, start, order = _build(Q, 2.0)
    d2 = np.empty(n)
    idx = np.empty(n, np.int64)
    maxr = max(dims[0], max(dims[1], dims[2]))
    for i in range(n):
        px = P[i, 0]
        py = P[i, 1]
        pz = P[i, 2]
        c = np.empty(3, np.int64)
        for a in range(3):
            s = (P[i, a] - lo[a]) / h
            if s < 0.0:
                k = 0
            elif s >= dims[a]:
                k = dims[a] - 1
            else:
                k = int(s)
            c[a] = k
        best = np.inf
        bj = -1
        r = 0
        while r <= maxr:
            # every point in ring r+1 is at least (r * h) away; one extra ring
            # of slack absorbs rounding in the cell assignment
            if bj >= 0 and r >= 2 and best < ((r - 1) * h) ** 2:
                break
            for a0 in range(c[0] - r, c[0] + r + 1):
                if a0 < 0 or a0 >= dims[0]:
                    continue
                for a1 in range(c[1] - r, c[1] + r + 1):
                    if a1 < 0 or a1 >= dims[1]:
                        continue
                    edge01 = a0 == c[0] - r or a0 == c[0] + r or a1 == c[1] - r \
                        or a1 == c[1] + r
                    for a2 in range(c[2] - r, c[2] + r + 1):
                        if a2 < 0 or a2 >= dims[2]:
                            continue
                        if not edge01 and a2 != c[2] - r and a2 != c[2] + r:
                            continue
                        cc = (a0 * dims[1] + a1) * dims[2] + a2
                        for t in range(start[cc], start[cc + 1]):
                            j = order[t]
                            dx = px - Q[j, 0]
                            dy = py - Q[j, 1]
                            dz = pz - Q[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best or (d == best and j < bj):
                                best = d
                                bj = j
            r += 1
        d2[i] = best
        idx[i] = bj
    return d2, idx


@njit(cache=True, nogil=True)
def _sum(a):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i]
    return s


def _positions(P):
    x = P.x if isinstance(P, ParticleState) else np.asarray(P, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
    if x.shape[0] == 0:
        raise ValidationError("empty point set")
    return x


def chamfer(P, Q):
    """Mean squared nearest-neighbour distance, P to Q plus Q to P.

    Accepts ParticleStates or (n, 3) arrays.  Summation runs in index order.
    """
    p = _positions(P)
    q = _positions(Q)
    dp, _ = nearest(p, q)
    dq, _ = nearest(q, p)
    return _sum(dp) / p.shape[0] + _sum(dq) / q.shape[0]


def chamfer_grad(P, Q):
    """Chamfer value and its gradient w.r.t. the positions of P.

    Nearest-neighbour assignments are held fixed (ties: lowest index).
    """
    p = _positions(P)
    q = _positions(Q)
    dp, ip = nearest(p, q)
    dq, iq = nearest(q, p)
    val = _sum(dp) / p.shape[0] + _sum(dq) / q.shape[0]
    g = 2.0 * (p - q[ip]) / p.shape[0]
    np.add.at(g, iq, 2.0 * (p[iq] - q) / q.shape[0])
    return val, g


def chamfer_brute(P, Q):
    """All-pairs reference implementation (O(|P||Q|) memory)."""
    p = _positions(P)
    q = _positions(Q)
    d = ((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()
