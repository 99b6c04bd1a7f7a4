"""Domain types: particle states, dynamics parameters, effectors, actions, scenes.

All types are immutable once built.  Array fields are stored as read-only
float64 numpy arrays (structure-of-arrays), so a ParticleState can be shared
between threads without copying.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class DipacError(Exception):
    """Base class for library errors."""


class SimulationError(DipacError):
    """A substep failed.  ``substep`` and ``particle`` locate the failure."""

    reason = "simulation failure"

    def __init__(self, substep=-1, particle=-1, step=None, detail=""):
        self.substep = int(substep)
        self.particle = int(particle)
        self.step = step
        msg = f"{self.reason} at substep {self.substep}, particle {self.particle}"
        if step is not None:
            msg = f"{msg} (action {step})"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class DomainEscape(SimulationError):
    reason = "domain escape"


class CFLViolation(SimulationError):
    reason = "CFL violation"


class NonFiniteState(SimulationError):
    reason = "non-finite state"


class ValidationError(DipacError, ValueError):
    """Invalid input data (arity, bounds, shapes, empty point sets)."""


class Material(enum.IntEnum):
    ELASTIC = 0
    GRANULAR = 1
    FLUID = 2


def _frozen(a, dtype=np.float64, shape=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Particles as structure-of-arrays plus the control-step counter."""

    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray
    mass: np.ndarray
    vol: np.ndarray
    material: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] == 0:
            raise ValidationError("particle state needs a non-empty (n, 3) position array")
        n = x.shape[0]
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "v", _frozen(self.v, shape=(n, 3)))
        object.__setattr__(self, "C", _frozen(self.C, shape=(n, 3, 3)))
        object.__setattr__(self, "F", _frozen(self.F, shape=(n, 3, 3)))
        object.__setattr__(self, "mass", _frozen(self.mass, shape=(n,)))
        object.__setattr__(self, "vol", _frozen(self.vol, shape=(n,)))
        object.__setattr__(self, "material", _frozen(self.material, np.int64, (n,)))
        object.__setattr__(self, "time_index", int(self.time_index))
        if self.time_index < 0:
            raise ValidationError("time_index must be >= 0")
        if not (np.all(self.mass > 0) and np.all(self.vol > 0)):
            raise ValidationError("particle mass and volume must be positive")
        if np.any((self.material < 0) | (self.material > 2)):
            raise ValidationError("unknown material id")

    @classmethod
    def at_rest(cls, x, mass, vol, material=Material.ELASTIC, v=None):
        """Fresh state with F = I, C = 0 (and v = 0 unless given)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        n = x.shape[0]
        F = np.broadcast_to(np.eye(3), (n, 3, 3))
        return cls(
            x=x,
            v=np.zeros((n, 3)) if v is None else v,
            C=np.zeros((n, 3, 3)),
            F=F,
            mass=np.broadcast_to(np.asarray(mass, float), (n,)),
            vol=np.broadcast_to(np.asarray(vol, float), (n,)),
            material=np.broadcast_to(np.asarray(material, np.int64), (n,)),
        )

    def __len__(self):
        return self.x.shape[0]

    @property
    def n(self):
        return self.x.shape[0]

    def replace(self, **kw):
        return replace(self, **kw)

    def is_finite(self):
        return bool(np.isfinite(self.x).all() and np.isfinite(self.v).all()
                    and np.isfinite(self.F).all() and np.isfinite(self.C).all())

    def bitwise_equal(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("x", "v", "C", "F", "mass", "vol", "material"))


def lame(E, nu):
    """Lame parameters (mu, lambda) from Young's modulus and Poisson ratio."""
    return E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


@dataclass(frozen=True)
class DynamicsParams:
    """Physics parameters.  Only ``E`` and ``mu`` are calibratable."""

    E: float = 5.0e3
    nu: float = 0.3
    mu: float = 0.5
    dt: float = 2.0e-4
    dx: float = 1.0 / 64
    gravity: tuple = (0.0, 0.0, -9.8)
    grid_dims: tuple = (64, 64, 64)
    fluid_bulk: float = 1.0e4
    substeps: int = 40
    granular_eps: float = 0.05
    sigma_floor: float = 0.05
    contact_band: float = 0.5  # in units of dx
    wall_margin: int = 3

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        if not (self.E > 0 and self.dt > 0 and self.dx > 0 and self.fluid_bulk > 0):
            raise ValidationError("E, dt, dx and fluid_bulk must be positive")
        if not 0.0 <= self.nu <= 0.45:
            raise ValidationError("poisson ratio must lie in [0, 0.45]")
        if self.mu < 0:
            raise ValidationError("friction must be >= 0")
        if len(self.gravity) != 3 or len(self.grid_dims) != 3:
            raise ValidationError("gravity and grid_dims need 3 components")
        if min(self.grid_dims) < 2 * self.wall_margin + 3:
            raise ValidationError("grid too small for the wall margin")
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")

    @property
    def lame(self):
        return lame(self.E, self.nu)

    @property
    def domain(self):
        """Axis-aligned box (lo, hi) in which particles must stay."""
        lo = np.full(3, self.dx)
        hi = (np.asarray(self.grid_dims) - 2.0) * self.dx
        return lo, hi

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {
            "E": self.E, "nu": self.nu, "mu": self.mu, "dt": self.dt, "dx": self.dx,
            "gravity": list(self.gravity), "grid_dims": list(self.grid_dims),
            "fluid_bulk": self.fluid_bulk, "substeps": self.substeps,
            "granular_eps": self.granular_eps, "sigma_floor": self.sigma_floor,
            "contact_band": self.contact_band, "wall_margin": self.wall_margin,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown parameter fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, shape=(3,)))
        object.__setattr__(self, "half_extents", _frozen(self.half_extents, shape=(3,)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, shape=(3, 3)))
        if np.any(self.half_extents <= 0):
            raise ValidationError("box half extents must be positive")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValidationError("box orientation must be a rotation")


@dataclass(frozen=True, eq=False)
class Effector:
    """Kinematic boxes.  ``static`` boxes (racks, bowls) never move.

    ``pivot`` is the rotation centre used by twist (Pour) actions.
    """

    boxes: tuple
    velocities: np.ndarray = None
    gripper_open: bool = False
    static: tuple = None
    pivot: np.ndarray = None

    def __post_init__(self):
        boxes = tuple(self.boxes)
        object.__setattr__(self, "boxes", boxes)
        nb = len(boxes)
        vel = np.zeros((nb, 3)) if self.velocities is None else self.velocities
        object.__setattr__(self, "velocities", _frozen(vel, shape=(nb, 3)))
        st = (False,) * nb if self.static is None else tuple(bool(s) for s in self.static)
        if len(st) != nb:
            raise ValidationError("static flags must match the number of boxes")
        object.__setattr__(self, "static", st)
        if self.pivot is None:
            moving = [b.center for b, s in zip(boxes, st) if not s]
            piv = np.mean(moving, axis=0) if moving else np.zeros(3)
        else:
            piv = self.pivot
        object.__setattr__(self, "pivot", _frozen(piv, shape=(3,)))

    @property
    def moving(self):
        return [b for b, s in zip(self.boxes, self.static) if not s]

    def midpoint(self):
        """Mean centre of the moving boxes (the 'gripper' reference point)."""
        mv = self.moving
        if not mv:
            return None
        return np.mean([b.center for b in mv], axis=0)


ACTION_ARITY = {"push": 42, "sweep": 4, "poseseq": 32, "pour": 6}


@dataclass(frozen=True, eq=False)
class Action:
    """Flat action vector with a task-family tag.

    push: (x0, y0, dx_1, dy_1, ..., dx_20, dy_20); sweep: (x0, y0, x1, y1);
    poseseq: 8 rows of (x, y, z, grip); pour: (vx, vy, vz, wx, wy, wz).
    """

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ACTION_ARITY:
            raise ValidationError(f"unknown action kind {self.kind!r}")
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.size != ACTION_ARITY[self.kind]:
            raise ValidationError(
                f"{self.kind} action needs {ACTION_ARITY[self.kind]} values, got {vals.size}")
        if not np.isfinite(vals).all():
            raise ValidationError("action values must be finite")
        object.__setattr__(self, "values", _frozen(vals))

    def with_values(self, values):
        return Action(self.kind, values)

    @classmethod
    def push(cls, start, deltas):
        return cls("push", np.concatenate([np.ravel(start), np.ravel(deltas)]))

    @classmethod
    def sweep(cls, start, end):
        return cls("sweep", np.concatenate([np.ravel(start), np.ravel(end)]))


TASKS = ("rope", "beans", "cloth", "pour_water", "pour_soup", "custom")
TASK_ACTION = {"rope": "push", "beans": "sweep", "cloth": "poseseq",
               "pour_water": "pour", "pour_soup": "pour"}


@dataclass(frozen=True, eq=False)
class Scene:
    initial_state: ParticleState
    goal_state: ParticleState
    params: DynamicsParams
    effector_template: Effector
    task_tag: str
    task_horizon: int
    planning_horizon: int
    action_kind: str = None
    bounds: tuple = None  # (lo, hi) arrays over the action vector

    def __post_init__(self):
        if self.task_tag not in TASKS:
            raise ValidationError(f"unknown task {self.task_tag!r}")
        kind = self.action_kind or TASK_ACTION.get(self.task_tag)
        if kind not in ACTION_ARITY:
            raise ValidationError("scene needs an action kind")
        object.__setattr__(self, "action_kind", kind)
        if self.task_horizon < 1 or not 1 <= self.planning_horizon <= self.task_horizon:
            raise ValidationError("horizons must satisfy 1 <= H <= T")
        lo, hi = self.params.domain
        for s in (self.initial_state, self.goal_state):
            if np.any(s.x < lo) or np.any(s.x > hi):
                raise ValidationError("particles must lie inside the domain box")
        if self.bounds is not None:
            blo = _frozen(self.bounds[0], shape=(ACTION_ARITY[kind],))
            bhi = _frozen(self.bounds[1], shape=(ACTION_ARITY[kind],))
            if np.any(blo > bhi):
                raise ValidationError("action bounds must satisfy lo <= hi")
            object.__setattr__(self, "bounds", (blo, bhi))

    def clip(self, action):
        if self.bounds is None:
            return action
        return action.with_values(np.clip(action.values, *self.bounds))

    def replace(self, **kw):
        return replace(self, **kw)


def particles_from_pointcloud(points, spacing, density=1000.0, material=Material.ELASTIC):
    """Fill a point cloud with particles on a voxel lattice.

    Voxels of size ``spacing`` are anchored so that voxel centres fall on the
    lattice ``min(points) + i * spacing``.  A voxel is occupied when it holds
    an input point or when a ray cast along +x from its centre (nudged by half
    a voxel in y and z to dodge degenerate hits) crosses the closed surface of
    the cloud an odd number of times; lattice points on the surface itself are
    kept too.  The surface is the convex hull of the cloud.  Coplanar clouds
    (sheets) have no interior and yield one particle per occupied voxel.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValidationError("empty point cloud")
    if not spacing > 0:
        raise ValidationError("spacing must be positive")
    lo = pts.min(axis=0)
    idx = np.rint((pts - lo) / spacing).astype(np.int64)
    occupied = {tuple(i) for i in idx}
    rank = _rank(pts)
    if len(pts) < 4 or rank < 2:
        raise ValidationError("degenerate point cloud: need >= 4 points spanning a plane")
    if rank == 3:
        from scipy.spatial import ConvexHull

        hull = ConvexHull(pts)
        tris = pts[hull.simplices]
        hi_idx = idx.max(axis=0)
        grid = np.stack(np.meshgrid(*[np.arange(h + 1) for h in hi_idx], indexing="ij"),
                        axis=-1).reshape(-1, 3)
        centres = lo + grid * spacing
        inside = _ray_parity(centres, tris, spacing)
        # lattice points lying on the hull surface count as occupied
        gap = (centres @ hull.equations[:, :3].T + hull.equations[:, 3]).max(axis=1)
        inside |= gap <= 1e-9 * spacing
        occupied.update(tuple(g) for g in grid[inside])
    cells = np.array(sorted(occupied), dtype=np.int64)
    x = lo + cells * spacing
    vol = spacing ** 3
    return ParticleState.at_rest(x, density * vol, vol, material)


def _rank(pts, tol=1e-12):
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def _ray_parity(origins, tris, spacing):
    """Odd-crossing test of +x rays against triangles (Moller-Trumbore)."""
    o = origins + np.array([0.0, 0.5, 0.5]) * spacing * 1e-3
    d = np.array([1.0, 0.0, 0.0])
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    e1, e2, v0, p, det = e1[ok], e2[ok], v0[ok], p[ok], det[ok]
    inv = 1.0 / det
    counts = np.zeros(len(o), dtype=np.int64)
    for start in range(0, len(o), 4096):
        oo = o[start:start + 4096, None, :]
        tv = oo - v0[None]
        u = np.einsum("nij,ij->ni", tv, p) * inv
        q = np.cross(tv, e1[None])
        v = (q @ d) * inv
        t = np.einsum("nij,ij->ni", q, e2) * inv
        hit = (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        counts[start:start + 4096] = hit.sum(axis=1)
    return counts % 2 == 1
