"""MLS-MPM transition function: one control action = ``params.substeps`` substeps.

The hot loops live in :mod:`dipac.mpm.kernels`; this module packs parameters,
owns the grid workspaces (one per thread and grid shape) and converts kernel
status codes into exceptions.
"""
import threading
from dataclasses import dataclass

import numpy as np

from ..core import (CFLViolation, DomainEscape, Effector, Material, NonFiniteState,
                    ParticleState, SimulationError, ValidationError)
from ..kinematics import EffectorPath, action_path
from . import kernels as K

_ERRORS = {K.DOMAIN_ESCAPE: DomainEscape, K.CFL_VIOLATION: CFLViolation,
           K.NON_FINITE: NonFiniteState}


def pack_params(params):
    mu_l, lam_l = params.lame
    prm = np.array([
        params.dt, params.dx, *params.gravity, mu_l, lam_l, params.fluid_bulk,
        params.mu, params.granular_eps, params.contact_band * params.dx,
        params.sigma_floor,
    ], dtype=np.float64)
    iprm = np.array([*params.grid_dims, params.wall_margin], dtype=np.int64)
    return prm, iprm


class Grid:
    """Dense background grid.  Only ``active`` nodes are non-zero between calls."""

    def __init__(self, dims, dx):
        self.dims = tuple(int(d) for d in dims)
        self.dx = float(dx)
        n = self.dims[0] * self.dims[1] * self.dims[2]
        self.mass = np.zeros(n)
        self.momentum = np.zeros((n, 3))
        self.velocity = np.zeros((n, 3))
        self.mark = np.zeros(n, np.int8)
        self.active = np.zeros(n, np.int64)
        self.n_active = 0
        self._adj = None

    @property
    def adjoint_buffers(self):
        if self._adj is None:
            n = self.mass.shape[0]
            self._adj = (np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n))
        return self._adj

    def node_index(self, flat):
        ny, nz = self.dims[1], self.dims[2]
        flat = np.asarray(flat)
        return np.stack([flat // (ny * nz), (flat // nz) % ny, flat % nz], axis=-1)

    def node_positions(self, flat):
        return self.node_index(flat) * self.dx

    def active_nodes(self):
        return self.active[:self.n_active].copy()

    def reset(self):
        K.reset_grid(self.mass, self.momentum, self.velocity, self.mark, self.active,
                     self.n_active)
        self.n_active = 0


_local = threading.local()


def workspace(params):
    """Thread-local grid for the given shape (grids are never shared across threads)."""
    cache = getattr(_local, "grids", None)
    if cache is None:
        cache = _local.grids = {}
    key = (params.grid_dims, params.dx)
    g = cache.get(key)
    if g is None:
        g = cache[key] = Grid(params.grid_dims, params.dx)
    return g


def _raise(status, substep, particle, step=None):
    raise _ERRORS.get(status, SimulationError)(substep, particle, step)


def _box_args(path):
    return (np.ascontiguousarray(path.centers, dtype=np.float64),
            np.ascontiguousarray(path.rotations, dtype=np.float64),
            np.ascontiguousarray(path.half, dtype=np.float64),
            np.ascontiguousarray(path.vel, dtype=np.float64),
            np.ascontiguousarray(path.omega, dtype=np.float64),
            np.ascontiguousarray(path.pivot, dtype=np.float64))


# ---------------------------------------------------------------------------
# single-phase operations (used by tests and diagnostics; `step` runs fused)
# ---------------------------------------------------------------------------


def bspline_weights(xp, params):
    """Quadratic B-spline stencil of one position: (27, 3) node indices, (27,) weights."""
    xp = np.asarray(xp, dtype=np.float64)
    inv_dx = 1.0 / params.dx
    s = xp * inv_dx
    dims = np.asarray(params.grid_dims)
    if not (np.all(s >= 1.0) and np.all(s <= dims - 2.0)):
        raise DomainEscape(-1, 0, detail="position outside the one-cell margin")
    base = np.floor(s - 0.5).astype(np.int64)
    f = s - base
    w = np.stack([0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2], axis=1)
    off = np.stack(np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij"),
                   axis=-1).reshape(27, 3)
    weights = w[0, off[:, 0]] * w[1, off[:, 1]] * w[2, off[:, 2]]
    return base + off, weights


def stress(F, params, material=Material.ELASTIC):
    """First Piola-Kirchhoff stress of the fixed-corotated (or fluid) model.

    No plastic projection is applied here; inverted elastic F are clamped to
    the singular-value floor first.
    """
    F = np.asarray(F, dtype=np.float64).reshape(3, 3)
    if not np.isfinite(F).all():
        raise NonFiniteState(detail="deformation gradient is not finite")
    mu_l, lam_l = params.lame
    if material == Material.FLUID:
        J = np.linalg.det(F)
        return params.fluid_bulk * (1.0 - J) * np.linalg.inv(F).T
    U, sig, Vt = np.linalg.svd(F)
    if np.linalg.det(U) < 0:
        U[:, 2] *= -1
        sig[2] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[2] *= -1
        sig[2] *= -1
    if material == Material.ELASTIC and np.any(sig < params.sigma_floor):
        sig = np.maximum(sig, params.sigma_floor)
        F = U @ np.diag(sig) @ Vt
    R = U @ Vt
    J = np.linalg.det(F)
    return 2.0 * mu_l * (F - R) + lam_l * (J - 1.0) * J * np.linalg.inv(F).T


def p2g(state, grid, params):
    """Scatter into ``grid`` (which must be reset).  Returns the projected F array."""
    prm, iprm = pack_params(params)
    F_new = np.empty((state.n, 3, 3))
    status, bad, na = K.p2g(state.x, state.v, state.C, state.F, state.mass, state.vol,
                            state.material, prm, iprm, grid.mass, grid.momentum, grid.mark,
                            grid.active, F_new)
    grid.n_active = na
    if status != K.OK:
        grid.reset()
        _raise(status, 0, bad)
    return F_new


def grid_update(grid, params, path=None):
    """Normalise, add gravity, apply effector boxes (substep 0 of ``path``) and walls."""
    prm, iprm = pack_params(params)
    if path is None:
        path = EffectorPath.empty(1)
    K.grid_update(grid.mass, grid.momentum, grid.velocity, grid.active, grid.n_active,
                  prm, iprm, *_box_args(path), 0)
    return grid


def g2p(state, grid, params, F_new=None):
    prm, iprm = pack_params(params)
    x = np.empty((state.n, 3))
    v = np.empty((state.n, 3))
    C = np.empty((state.n, 3, 3))
    status, bad = K.g2p(state.x, grid.velocity, prm, iprm, x, v, C)
    if status != K.OK:
        _raise(status, 0, bad)
    return state.replace(x=x, v=v, C=C, F=state.F if F_new is None else F_new)


# ---------------------------------------------------------------------------
# fused substep loop
# ---------------------------------------------------------------------------


@dataclass
class SubstepTrace:
    """Pre-substep particle checkpoints plus the effector path, for the adjoint."""

    x: np.ndarray   # (S, n, 3)
    v: np.ndarray
    C: np.ndarray   # (S, n, 3, 3)
    F: np.ndarray
    path: EffectorPath
    state: ParticleState  # pre-action state (mass, volume, material)

    def __len__(self):
        return self.x.shape[0]


def advance(state, path, params, record=True, step_index=None):
    """Run the substeps of ``path`` from ``state``.  Returns (state, trace or None)."""
    S = path.substeps
    n = state.n
    x = np.array(state.x)
    v = np.array(state.v)
    C = np.array(state.C)
    F = np.array(state.F)
    if record:
        ck = (np.empty((S, n, 3)), np.empty((S, n, 3)), np.empty((S, n, 3, 3)),
              np.empty((S, n, 3, 3)))
    else:
        ck = (np.empty((0, n, 3)), np.empty((0, n, 3)), np.empty((0, n, 3, 3)),
              np.empty((0, n, 3, 3)))
    prm, iprm = pack_params(params)
    g = workspace(params)
    status, sub, bad = K.advance(x, v, C, F, state.mass, state.vol, state.material, prm, iprm,
                                 *_box_args(path), g.mass, g.momentum, g.velocity, g.mark,
                                 g.active, record, *ck)
    if status != K.OK:
        _raise(status, sub, bad, step_index)
    out = ParticleState(x, v, C, F, state.mass, state.vol, state.material,
                        state.time_index + 1)
    trace = SubstepTrace(*ck, path=path, state=state) if record else None
    return out, trace


def step(state, action, effector, params, record=True, step_index=None):
    """Apply one control action.  Returns (next state, effector after, trace)."""
    if effector is None:
        effector = Effector(())
    path = action_path(action, effector, params)
    nxt, trace = advance(state, path, params, record, step_index)
    return nxt, path.end, trace


def rollout(state, actions, params, effector=None, record=True):
    """Apply ``actions`` in order.  Returns (states, effectors, traces).

    ``states`` has len(actions) + 1 entries and ``effectors[t]`` is the
    effector before action t (the last entry is the final effector).
    """
    if len(actions) == 0:
        raise ValidationError("rollout needs at least one action")
    if effector is None:
        effector = Effector(())
    states = [state]
    effectors = [effector]
    traces = []
    for t, a in enumerate(actions):
        state, effector, tr = step(state, a, effector, params, record, step_index=t)
        states.append(state)
        effectors.append(effector)
        traces.append(tr)
    return states, effectors, traces
