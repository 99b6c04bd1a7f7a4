"""Action -> effector box trajectories over the substeps of one control step.

All path functions are written with plain numpy arithmetic so they accept
complex inputs; ``path_jacobian`` differentiates them by complex step, which
is exact to rounding for these smooth maps.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .core import Box, Effector, ValidationError

log = logging.getLogger(__name__)

N_PUSH_DELTAS = 20
N_POSES = 8
GRIP_STROKE = 0.03  # finger separation added when the gripper opens (m)
_CSTEP = 1e-30


@dataclass
class EffectorPath:
    """Per-substep box state fed to the MPM kernels."""

    centers: np.ndarray    # (S, nb, 3)
    rotations: np.ndarray  # (S, nb, 3, 3)
    half: np.ndarray       # (nb, 3)
    vel: np.ndarray        # (S, nb, 3)
    omega: np.ndarray      # (S, nb, 3)
    pivot: np.ndarray      # (S, nb, 3)
    end: Effector = None
    clipped: bool = False  # some waypoint was clamped to the domain

    @property
    def substeps(self):
        return self.centers.shape[0]

    @classmethod
    def static(cls, effector, substeps):
        """Boxes held still for ``substeps`` substeps."""
        nb = len(effector.boxes)
        c = np.array([b.center for b in effector.boxes]).reshape(nb, 3)
        R = np.array([b.rotation for b in effector.boxes]).reshape(nb, 3, 3)
        h = np.array([b.half_extents for b in effector.boxes]).reshape(nb, 3)
        S = substeps
        return cls(np.repeat(c[None], S, 0), np.repeat(R[None], S, 0), h,
                   np.zeros((S, nb, 3)), np.zeros((S, nb, 3)), np.zeros((S, nb, 3)), effector)

    @classmethod
    def empty(cls, substeps):
        S = substeps
        return cls(np.zeros((S, 0, 3)), np.zeros((S, 0, 3, 3)), np.zeros((0, 3)),
                   np.zeros((S, 0, 3)), np.zeros((S, 0, 3)), np.zeros((S, 0, 3)),
                   Effector(()))


def _template(effector):
    boxes = effector.boxes
    nb = len(boxes)
    c = np.array([b.center for b in boxes], dtype=float).reshape(nb, 3)
    R = np.array([b.rotation for b in boxes], dtype=float).reshape(nb, 3, 3)
    h = np.array([b.half_extents for b in boxes], dtype=float).reshape(nb, 3)
    moving = ~np.array(effector.static, dtype=bool)
    mid = c[moving].mean(axis=0) if moving.any() else np.zeros(3)
    return c, R, h, moving, mid


def _interp(points, S):
    """Positions at substeps 0..S along a polyline of K+1 points, K segments.

    points: (B, K+1, 3) -> (B, S+1, 3); segment boundaries are placed at
    equal substep fractions.
    """
    K = points.shape[1] - 1
    tau = np.arange(S + 1) * (K / S)
    k = np.minimum(np.floor(tau).astype(np.int64), K - 1)
    f = (tau - k)[None, :, None]
    return points[:, k] * (1.0 - f) + points[:, k + 1] * f


def _clip_real(p, lo, hi):
    """Clamp by real part; clamped entries become constants (zero derivative)."""
    out = p.copy()
    below = p.real < lo
    above = p.real > hi
    if below.any() or above.any():
        lo_b = np.broadcast_to(lo, p.shape)
        hi_b = np.broadcast_to(hi, p.shape)
        out[below] = lo_b[below]
        out[above] = hi_b[above]
    return out, bool(below.any() or above.any())


def _rodrigues(w, t):
    """exp(t [w]x) for twist rates w (B, 3) and times t (S,) -> (B, S, 3, 3).

    Written in terms of theta^2 so that it is analytic at w = 0.
    """
    th2 = (w * w).sum(-1)[:, None] * (t * t)[None, :]
    small = np.abs(th2) < 1e-6
    th2s = np.where(small, 1.0, th2)
    th = np.sqrt(th2s)
    A = np.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0, np.sin(th) / th)
    Bc = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0, (1.0 - np.cos(th)) / th2s)
    K = np.zeros(w.shape[:1] + (3, 3), dtype=w.dtype)
    K[:, 0, 1] = -w[:, 2]
    K[:, 0, 2] = w[:, 1]
    K[:, 1, 0] = w[:, 2]
    K[:, 1, 2] = -w[:, 0]
    K[:, 2, 0] = -w[:, 1]
    K[:, 2, 1] = w[:, 0]
    Kt = K[:, None] * t[None, :, None, None]
    K2 = Kt @ Kt
    eye = np.eye(3)[None, None]
    return eye + A[..., None, None] * Kt + Bc[..., None, None] * K2


def _batch_path(kind, vals, effector, S, dt, domain):
    """Box trajectories for a batch of action vectors ``vals`` (B, arity).

    Returns centers (B, S+1, nb, 3), rotations (B, S+1, nb, 3, 3), velocity,
    angular velocity and pivot (B, S, nb, 3), and the final grip flag.
    """
    c0, R0, h, moving, mid0 = _template(effector)
    nb = c0.shape[0]
    B = vals.shape[0]
    dtype = vals.dtype
    lo, hi = domain
    offs = c0 - mid0
    clipped = False
    grip_open = effector.gripper_open
    omega = np.zeros((B, S, nb, 3), dtype=dtype)
    if kind in ("push", "sweep"):
        z = np.full((B, 1), mid0[2], dtype=dtype)
        if kind == "push":
            start = vals[:, :2]
            d = vals[:, 2:].reshape(B, N_PUSH_DELTAS, 2)
            xy = np.concatenate([start[:, None], start[:, None] + np.cumsum(d, axis=1)], 1)
        else:
            xy = vals.reshape(B, 2, 2)
        pts = np.concatenate([xy, np.broadcast_to(z[:, None], xy.shape[:2] + (1,))], -1)
        mid, clipped = _clip_real(_interp(pts, S), lo, hi)
        centers = mid[:, :, None, :] + offs[None, None]
        rots = np.broadcast_to(R0[None, None], (B, S + 1, nb, 3, 3)).astype(dtype)
        pivot = mid[:, :-1, None, :] + np.zeros((1, 1, nb, 1))
        pend = mid[:, -1]
    elif kind == "poseseq":
        poses = vals.reshape(B, N_POSES, 4)
        pts = np.concatenate([np.broadcast_to(mid0.astype(dtype), (B, 1, 3)), poses[:, :, :3]], 1)
        mid, clipped = _clip_real(_interp(pts, S), lo, hi)
        # finger spread: closed when grip >= 0.5 for the segment being traversed
        grip = poses[:, :, 3].real >= 0.5
        K = N_POSES
        seg = np.minimum((np.arange(S + 1) * K) // S, K - 1)
        spread = np.where(grip[:, seg], 0.0, 0.5 * GRIP_STROKE)  # (B, S+1)
        axis = _finger_axis(offs, moving)
        side = np.sign(offs @ axis)
        centers = (mid[:, :, None, :] + offs[None, None]
                   + spread[:, :, None, None] * (side[:, None] * axis[None])[None, None])
        rots = np.broadcast_to(R0[None, None], (B, S + 1, nb, 3, 3)).astype(dtype)
        pivot = mid[:, :-1, None, :] + np.zeros((1, 1, nb, 1))
        pend = mid[:, -1]
        grip_open = bool(not grip[0, -1])
    elif kind == "pour":
        v = vals[:, :3]
        w = vals[:, 3:]
        t = np.arange(S + 1) * dt
        Q = _rodrigues(w, t)  # (B, S+1, 3, 3)
        piv0 = np.asarray(effector.pivot, dtype=float)
        piv = piv0[None, None] + v[:, None, :] * t[None, :, None]
        rel = c0 - piv0
        centers = piv[:, :, None, :] + np.einsum("bsij,nj->bsni", Q, rel)
        rots = np.einsum("bsij,njk->bsnik", Q, R0)
        pivot = np.broadcast_to(piv[:, :-1, None, :], (B, S, nb, 3)).astype(dtype)
        omega = np.broadcast_to(w[:, None, None, :], (B, S, nb, 3)).astype(dtype)
        pend = piv[:, -1]
        _, clipped = _clip_real(piv, lo, hi)
        if clipped:
            raise ValidationError("pour twist drives the container out of the domain")
    else:
        raise ValidationError(f"unknown action kind {kind!r}")
    if kind == "pour":
        vel = np.broadcast_to(v[:, None, None, :], (B, S, nb, 3)).astype(dtype)
    elif kind == "poseseq":
        # opening and closing is instantaneous; only the carrier motion has velocity
        vel = np.broadcast_to(((mid[:, 1:] - mid[:, :-1]) / dt)[:, :, None, :],
                              (B, S, nb, 3)).astype(dtype)
    else:
        vel = (centers[:, 1:] - centers[:, :-1]) / dt
    # static boxes never move
    st = ~moving
    if st.any():
        centers = centers.copy()
        rots = rots.copy()
        vel = vel.copy()
        omega = np.array(omega)
        centers[:, :, st] = c0[st]
        rots[:, :, st] = R0[st]
        vel[:, :, st] = 0.0
        omega[:, :, st] = 0.0
    return centers, rots, vel, omega, pivot, pend, clipped, grip_open


def _finger_axis(offs, moving):
    """Direction along which the moving boxes are spread (their opening axis)."""
    m = offs[moving]
    if len(m) < 2:
        return np.array([1.0, 0.0, 0.0])
    d = m[0] - m[-1]
    n = np.linalg.norm(d)
    return d / n if n > 0 else np.array([1.0, 0.0, 0.0])


def action_path(action, effector, params, warn=False):
    """EffectorPath for one action starting from ``effector``.

    Waypoints outside the domain are clamped (logged at debug level, or as a
    warning with ``warn``).
    """
    S = params.substeps
    lo, hi = params.domain
    centers, rots, vel, omega, pivot, pend, clipped, grip_open = _batch_path(
        action.kind, action.values[None].astype(float), effector, S, params.dt, (lo, hi))
    if clipped:
        (log.warning if warn else log.debug)("effector waypoint outside the domain; clipped")
    h = np.array([b.half_extents for b in effector.boxes], dtype=float).reshape(-1, 3)
    end = Effector(
        boxes=tuple(Box(centers[0, S, b], h[b], _orthonormal(rots[0, S, b]))
                    for b in range(h.shape[0])),
        velocities=vel[0, S - 1],
        gripper_open=grip_open,
        static=effector.static,
        pivot=pend[0].real,
    )
    return EffectorPath(centers[0, :S], rots[0, :S], h, vel[0], omega[0], pivot[0], end,
                        clipped)


def _orthonormal(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def path_jacobian(action, effector, params):
    """d(path arrays)/d(action values) by complex step.

    Returns a dict of arrays with a trailing axis over action coordinates:
    centers (S, nb, 3, K), rotations (S, nb, 3, 3, K), vel, omega, pivot.
    """
    K = action.values.size
    S = params.substeps
    vals = action.values[None].astype(complex) + 1j * _CSTEP * np.eye(K)
    centers, rots, vel, omega, pivot, *_ = _batch_path(
        action.kind, vals, effector, S, params.dt, params.domain)
    def jac(a):
        return np.moveaxis(np.imag(a) / _CSTEP, 0, -1)
    return {"centers": jac(centers[:, :S]), "rotations": jac(rots[:, :S]),
            "vel": jac(vel), "omega": jac(omega), "pivot": jac(pivot)}


def start_midpoint(action, effector, params):
    """Mean centre of the moving boxes at the start of the action and its Jacobian (3, K)."""
    K = action.values.size
    moving = ~np.array(effector.static, dtype=bool)
    if not moving.any():
        return None, None
    vals = np.concatenate([action.values[None].astype(complex),
                           action.values[None] + 1j * _CSTEP * np.eye(K)])
    S = 1
    centers, *_ = _batch_path(action.kind, vals, effector, S, params.dt, params.domain)
    m = centers[:, 0, moving].mean(axis=1)
    return m[0].real.copy(), (np.imag(m[1:]) / _CSTEP).T
