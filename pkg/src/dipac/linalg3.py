"""Small 3x3 linear algebra helpers compiled with numba.

The SVD is signed: ``U`` and ``V`` are proper rotations, singular values are
sorted in decreasing order and only the last one may be negative (inverted
elements).  Everything here is written for use inside the MPM kernels, so the
functions take preallocated output arrays where that saves allocations.
"""
import math

import numpy as np
from numba import njit

_JACOBI_SWEEPS = 32


@njit(cache=True, nogil=True)
def det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit(cache=True, nogil=True)
def cofactor3(A, out):
    """Cofactor matrix, i.e. det(A) * A^{-T}, without dividing by det."""
    out[0, 0] = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    out[0, 1] = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    out[0, 2] = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    out[1, 0] = A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]
    out[1, 1] = A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
    out[1, 2] = A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]
    out[2, 0] = A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]
    out[2, 1] = A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]
    out[2, 2] = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]


@njit(cache=True, nogil=True)
def matmul3(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True, nogil=True)
def matmul3_nt(A, B, out):
    """out = A @ B.T"""
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[j, 0] + A[i, 1] * B[j, 1] + A[i, 2] * B[j, 2]


@njit(cache=True, nogil=True)
def matmul3_tn(A, B, out):
    """out = A.T @ B"""
    for i in range(3):
        for j in range(3):
            out[i, j] = A[0, i] * B[0, j] + A[1, i] * B[1, j] + A[2, i] * B[2, j]


@njit(cache=True, nogil=True, inline="always")
def _jacobi_angle(app, aqq, apq):
    theta = (aqq - app) / (2.0 * apq)
    if abs(theta) > 1e150:
        t = 0.5 / theta
    else:
        t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
        if theta < 0.0:
            t = -t
    c = 1.0 / math.sqrt(t * t + 1.0)
    return t, c, t * c


@njit(cache=True, nogil=True, inline="always")
def _negligible(apq, app, aqq):
    g = 100.0 * abs(apq)
    return abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq)


@njit(cache=True, nogil=True)
def _sym_eig3(a00, a11, a22, a01, a02, a12):
    """Cyclic Jacobi on a symmetric 3x3 given by its six entries.

    Returns the eigenvalues (l0, l1, l2) and eigenvector columns V as nine
    scalars, row-major.  Works on scalars only, so nothing is allocated.
    """
    v00, v01, v02 = 1.0, 0.0, 0.0
    v10, v11, v12 = 0.0, 1.0, 0.0
    v20, v21, v22 = 0.0, 0.0, 1.0
    for sweep in range(_JACOBI_SWEEPS):
        if a01 == 0.0 and a02 == 0.0 and a12 == 0.0:
            break
        # (p, q) = (0, 1), r = 2
        if a01 != 0.0:
            if _negligible(a01, a00, a11):
                a01 = 0.0
            else:
                t, c, s = _jacobi_angle(a00, a11, a01)
                a00 = a00 - t * a01
                a11 = a11 + t * a01
                a01 = 0.0
                arp, arq = a02, a12
                a02 = c * arp - s * arq
                a12 = s * arp + c * arq
                v00, v01 = c * v00 - s * v01, s * v00 + c * v01
                v10, v11 = c * v10 - s * v11, s * v10 + c * v11
                v20, v21 = c * v20 - s * v21, s * v20 + c * v21
        # (p, q) = (0, 2), r = 1
        if a02 != 0.0:
            if _negligible(a02, a00, a22):
                a02 = 0.0
            else:
                t, c, s = _jacobi_angle(a00, a22, a02)
                a00 = a00 - t * a02
                a22 = a22 + t * a02
                a02 = 0.0
                arp, arq = a01, a12
                a01 = c * arp - s * arq
                a12 = s * arp + c * arq
                v00, v02 = c * v00 - s * v02, s * v00 + c * v02
                v10, v12 = c * v10 - s * v12, s * v10 + c * v12
                v20, v22 = c * v20 - s * v22, s * v20 + c * v22
        # (p, q) = (1, 2), r = 0
        if a12 != 0.0:
            if _negligible(a12, a11, a22):
                a12 = 0.0
            else:
                t, c, s = _jacobi_angle(a11, a22, a12)
                a11 = a11 - t * a12
                a22 = a22 + t * a12
                a12 = 0.0
                arp, arq = a01, a02
                a01 = c * arp - s * arq
                a02 = s * arp + c * arq
                v01, v02 = c * v01 - s * v02, s * v01 + c * v02
                v11, v12 = c * v11 - s * v12, s * v11 + c * v12
                v21, v22 = c * v21 - s * v22, s * v21 + c * v22
    return a00, a11, a22, v00, v01, v02, v10, v11, v12, v20, v21, v22


@njit(cache=True, nogil=True)
def svd3(F, U, sig, V):
    """Signed SVD F = U diag(sig) V^T with det(U) = det(V) = +1."""
    f00, f01, f02 = F[0, 0], F[0, 1], F[0, 2]
    f10, f11, f12 = F[1, 0], F[1, 1], F[1, 2]
    f20, f21, f22 = F[2, 0], F[2, 1], F[2, 2]
    l0, l1, l2, v00, v01, v02, v10, v11, v12, v20, v21, v22 = _sym_eig3(
        f00 * f00 + f10 * f10 + f20 * f20,
        f01 * f01 + f11 * f11 + f21 * f21,
        f02 * f02 + f12 * f12 + f22 * f22,
        f00 * f01 + f10 * f11 + f20 * f21,
        f00 * f02 + f10 * f12 + f20 * f22,
        f01 * f02 + f11 * f12 + f21 * f22)
    # sort eigenpairs in decreasing order (stable bubble over three columns)
    if l0 < l1:
        l0, l1 = l1, l0
        v00, v01 = v01, v00
        v10, v11 = v11, v10
        v20, v21 = v21, v20
    if l1 < l2:
        l1, l2 = l2, l1
        v01, v02 = v02, v01
        v11, v12 = v12, v11
        v21, v22 = v22, v21
    if l0 < l1:
        l0, l1 = l1, l0
        v00, v01 = v01, v00
        v10, v11 = v11, v10
        v20, v21 = v21, v20
    dv = (v00 * (v11 * v22 - v12 * v21) - v01 * (v10 * v22 - v12 * v20)
          + v02 * (v10 * v21 - v11 * v20))
    if dv < 0.0:
        v02, v12, v22 = -v02, -v12, -v22
    V[0, 0], V[0, 1], V[0, 2] = v00, v01, v02
    V[1, 0], V[1, 1], V[1, 2] = v10, v11, v12
    V[2, 0], V[2, 1], V[2, 2] = v20, v21, v22
    # B = F V
    b00 = f00 * v00 + f01 * v10 + f02 * v20
    b10 = f10 * v00 + f11 * v10 + f12 * v20
    b20 = f20 * v00 + f21 * v10 + f22 * v20
    b01 = f00 * v01 + f01 * v11 + f02 * v21
    b11 = f10 * v01 + f11 * v11 + f12 * v21
    b21 = f20 * v01 + f21 * v11 + f22 * v21
    b02 = f00 * v02 + f01 * v12 + f02 * v22
    b12 = f10 * v02 + f11 * v12 + f12 * v22
    b22 = f20 * v02 + f21 * v12 + f22 * v22
    n0 = math.sqrt(b00 * b00 + b10 * b10 + b20 * b20)
    if n0 > 1e-300:
        u00, u10, u20 = b00 / n0, b10 / n0, b20 / n0
    else:
        u00, u10, u20 = 1.0, 0.0, 0.0
    d = u00 * b01 + u10 * b11 + u20 * b21
    b1x = b01 - d * u00
    b1y = b11 - d * u10
    b1z = b21 - d * u20
    n1 = math.sqrt(b1x * b1x + b1y * b1y + b1z * b1z)
    if n1 > 1e-12 * n0 and n1 > 1e-300:
        u01, u11, u21 = b1x / n1, b1y / n1, b1z / n1
    else:
        # any unit vector orthogonal to the first column
        if abs(u00) < 0.9:
            ex, ey, ez = 1.0, 0.0, 0.0
        else:
            ex, ey, ez = 0.0, 1.0, 0.0
        cx = u10 * ez - u20 * ey
        cy = u20 * ex - u00 * ez
        cz = u00 * ey - u10 * ex
        nc = math.sqrt(cx * cx + cy * cy + cz * cz)
        u01, u11, u21 = cx / nc, cy / nc, cz / nc
    u02 = u10 * u21 - u20 * u11
    u12 = u20 * u01 - u00 * u21
    u22 = u00 * u11 - u10 * u01
    U[0, 0], U[0, 1], U[0, 2] = u00, u01, u02
    U[1, 0], U[1, 1], U[1, 2] = u10, u11, u12
    U[2, 0], U[2, 1], U[2, 2] = u20, u21, u22
    sig[0] = u00 * b00 + u10 * b10 + u20 * b20
    sig[1] = u01 * b01 + u11 * b11 + u21 * b21
    sig[2] = u02 * b02 + u12 * b12 + u22 * b22


@njit(cache=True, nogil=True)
def isotropic_adjoint(U, sig, g, dg, V, Gbar, out, work):
    """Pull back an adjoint through F -> U diag(g(sig)) V^T.

    ``g`` holds g(sig) and ``dg`` the elementwise derivative g'(sig).  The
    Jacobian is symmetric in the singular frame, so the same map serves the
    forward and the adjoint direction.  ``work`` is (>= 3, 3, 3) scratch.
    """
    P = work[0]
    T = work[1]
    Q = work[2]
    matmul3_tn(U, Gbar, T)
    matmul3(T, V, P)
    for i in range(3):
        for j in range(3):
            Q[i, j] = 0.0
        Q[i, i] = dg[i] * P[i, i]
    for i in range(3):
        for j in range(i + 1, 3):
            ds = sig[i] - sig[j]
            if abs(ds) > 1e-10:
                alpha = (g[i] - g[j]) / ds
            else:
                alpha = 0.5 * (dg[i] + dg[j])
            ss = sig[i] + sig[j]
            if abs(ss) < 1e-6:
                ss = 1e-6 if ss >= 0.0 else -1e-6
            beta = (g[i] + g[j]) / ss
            sym = 0.5 * (P[i, j] + P[j, i])
            skw = 0.5 * (P[i, j] - P[j, i])
            Q[i, j] = alpha * sym + beta * skw
            Q[j, i] = alpha * sym - beta * skw
    matmul3(U, Q, T)
    matmul3_nt(T, V, out)


@njit(cache=True, nogil=True)
def polar_rotation_adjoint(R, sig, V, Rbar, out, work):
    """Adjoint of the polar rotation R = U V^T of F = U diag(sig) V^T.

    Adds dL/dF to ``out`` given dL/dR.  Uses the 1/(sig_i + sig_j) form, which
    stays bounded when singular values coincide.  ``work`` is (>= 3, 3, 3)
    scratch.
    """
    M = work[0]
    T = work[1]
    Gh = work[2]
    matmul3_tn(R, Rbar, M)
    for i in range(3):
        for j in range(3):
            T[i, j] = 0.5 * (M[i, j] - M[j, i])
    # Gh = V^T skew(R^T Rbar) V, scaled by 1/(sig_i + sig_j)
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += V[k, i] * (T[k, 0] * V[0, j] + T[k, 1] * V[1, j] + T[k, 2] * V[2, j])
            ss = sig[i] + sig[j]
            if abs(ss) < 1e-6:
                ss = 1e-6 if ss >= 0.0 else -1e-6
            Gh[i, j] = acc / ss
    # Y = V Gh V^T, out += 2 R Y
    for i in range(3):
        for j in range(3):
            M[i, j] = (V[i, 0] * (Gh[0, 0] * V[j, 0] + Gh[0, 1] * V[j, 1] + Gh[0, 2] * V[j, 2])
                       + V[i, 1] * (Gh[1, 0] * V[j, 0] + Gh[1, 1] * V[j, 1]
                                    + Gh[1, 2] * V[j, 2])
                       + V[i, 2] * (Gh[2, 0] * V[j, 0] + Gh[2, 1] * V[j, 1]
                                    + Gh[2, 2] * V[j, 2]))
    for i in range(3):
        for j in range(3):
            out[i, j] += 2.0 * (R[i, 0] * M[0, j] + R[i, 1] * M[1, j] + R[i, 2] * M[2, j])


@njit(cache=True, nogil=True)
def polar_newton(F, R):
    """Rotation factor of F by Newton's iteration X <- (X + X^{-T}) / 2.

    Only valid when det(F) > 0.  The first iterations are scaled by
    |det X|^{-1/3}, which makes the iteration converge in a handful of steps
    for any well-conditioned F.  Stops one iteration after the update falls
    below 1e-9 (quadratic convergence puts the result at rounding level).
    """
    x00, x01, x02 = F[0, 0], F[0, 1], F[0, 2]
    x10, x11, x12 = F[1, 0], F[1, 1], F[1, 2]
    x20, x21, x22 = F[2, 0], F[2, 1], F[2, 2]
    done = False
    for it in range(40):
        c00 = x11 * x22 - x12 * x21
        c01 = x12 * x20 - x10 * x22
        c02 = x10 * x21 - x11 * x20
        c10 = x02 * x21 - x01 * x22
        c11 = x00 * x22 - x02 * x20
        c12 = x01 * x20 - x00 * x21
        c20 = x01 * x12 - x02 * x11
        c21 = x02 * x10 - x00 * x12
        c22 = x00 * x11 - x01 * x10
        d = x00 * c00 + x01 * c01 + x02 * c02
        if it < 2:
            g = 1.0 / np.cbrt(abs(d))
        else:
            g = 1.0
        a = 0.5 * g
        b = 0.5 / (g * d)
        y00 = a * x00 + b * c00
        y01 = a * x01 + b * c01
        y02 = a * x02 + b * c02
        y10 = a * x10 + b * c10
        y11 = a * x11 + b * c11
        y12 = a * x12 + b * c12
        y20 = a * x20 + b * c20
        y21 = a * x21 + b * c21
        y22 = a * x22 + b * c22
        delta = max(abs(y00 - x00), abs(y01 - x01), abs(y02 - x02),
                    abs(y10 - x10), abs(y11 - x11), abs(y12 - x12),
                    abs(y20 - x20), abs(y21 - x21), abs(y22 - x22))
        x00, x01, x02 = y00, y01, y02
        x10, x11, x12 = y10, y11, y12
        x20, x21, x22 = y20, y21, y22
        if done:
            break
        if delta < 1e-9:
            done = True
    R[0, 0], R[0, 1], R[0, 2] = x00, x01, x02
    R[1, 0], R[1, 1], R[1, 2] = x10, x11, x12
    R[2, 0], R[2, 1], R[2, 2] = x20, x21, x22
