"""Desk-scale scene builders, action kinematics and synthetic demonstrations.

All scenes live in a 1 m cube resolved by a 64^3 grid unless noted.  The
floor sits on top of the wall margin, at ``wall_margin * dx``.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import (Action, Box, DynamicsParams, Effector, Material, ParticleState, Scene,
                   ValidationError, particles_from_pointcloud)
from .kinematics import N_POSES, N_PUSH_DELTAS, action_path
from .planner import PlanConfig

log = logging.getLogger(__name__)

DENSITY = 1000.0


@dataclass(frozen=True)
class TaskSpec:
    builder: str
    n_particles: int
    material: Material
    domain: tuple  # (lo, hi) corners of the usable box under default params
    plan: PlanConfig


_DOMAIN = tuple(tuple(float(v) for v in c) for c in DynamicsParams().domain)

# Tree size and depth per task; rope, beans and cloth follow the published
# hyperparameter table, the pouring entries are ours.
TASK_SPECS = {
    "rope": TaskSpec("rope", 2000, Material.ELASTIC, _DOMAIN, PlanConfig(k=15, H=3)),
    "beans": TaskSpec("beans", 300, Material.GRANULAR, _DOMAIN, PlanConfig(k=149, H=1)),
    "cloth": TaskSpec("cloth", 1000, Material.ELASTIC, _DOMAIN, PlanConfig(k=15, H=3)),
    "pour_water": TaskSpec("pour_water", 726, Material.FLUID, _DOMAIN, PlanConfig(k=15, H=3)),
    "pour_soup": TaskSpec("pour_soup", 826, Material.FLUID, _DOMAIN, PlanConfig(k=15, H=3)),
}

TOY_ROPE_PLAN = PlanConfig(k=15, H=3, opt_iters=3, eta=0.1, contact_weight=1e-4)


def _floor(params):
    return params.wall_margin * params.dx


def _span(params):
    """Scalar (lo, hi) of the domain in the table plane."""
    lo, hi = params.domain
    return float(max(lo[0], lo[1])), float(min(hi[0], hi[1]))


def _domain(params):
    lo, hi = _span(params)
    f = _floor(params)
    return (np.array([lo + 2 * params.dx, lo + 2 * params.dx, f]),
            np.array([hi - 2 * params.dx, hi - 2 * params.dx, hi - 2 * params.dx]))


def default_bounds(scene):
    """Per-coordinate action bounds used when a scene carries none."""
    p = scene.params
    lo, hi = _domain(p)
    kind = scene.action_kind
    if kind == "push":
        step = 0.005
        blo = np.concatenate([lo[:2], np.full(2 * N_PUSH_DELTAS, -step)])
        bhi = np.concatenate([hi[:2], np.full(2 * N_PUSH_DELTAS, step)])
    elif kind == "sweep":
        blo = np.tile(lo[:2], 2)
        bhi = np.tile(hi[:2], 2)
    elif kind == "poseseq":
        blo = np.tile(np.append(lo, 0.0), N_POSES)
        bhi = np.tile(np.append(hi, 1.0), N_POSES)
    else:
        blo = np.array([-0.5, -0.5, -0.5, -10.0, -10.0, -10.0])
        bhi = -blo
    return blo, bhi


def _state(x, material=Material.ELASTIC, spacing=None, vol=None):
    x = np.asarray(x, dtype=np.float64)
    if vol is None:
        vol = spacing ** 3
    return ParticleState.at_rest(x, DENSITY * vol, vol, material)


# ---------------------------------------------------------------------------
# rope
# ---------------------------------------------------------------------------


def _vogel_disc(n, radius):
    """n points spread evenly over a disc (sunflower pattern)."""
    i = np.arange(n)
    r = radius * np.sqrt((i + 0.5) / n)
    th = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _resample(curve, m):
    """m points at equal arc length along a dense polyline."""
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.linspace(0.0, s[-1], m)
    return np.stack([np.interp(t, s, curve[:, a]) for a in range(curve.shape[1])], axis=1)


def _sweep_section(center2d, section, z0):
    """Place a cross-section (offsets across, up) at every centreline point."""
    tang = np.gradient(center2d, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    xy = center2d[:, None, :] + section[None, :, 0, None] * normal[:, None, :]
    z = np.broadcast_to(z0 + section[None, :, 1], xy.shape[:2])
    return np.concatenate([xy, z[..., None]], axis=-1).reshape(-1, 3)


def _rope(seed, params, n_slices, section, length, radius, effector_half):
    rng = np.random.default_rng(seed)
    lo, hi = _span(params)
    mid = 0.5 * (lo + hi)
    heading = rng.uniform(0.0, math.pi)
    u = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-u[1], u[0]])
    centre = mid + rng.uniform(-0.05, 0.05, size=2)
    amp = rng.uniform(0.04, 0.07) * rng.choice([-1.0, 1.0])
    waves = rng.choice([1, 2])
    xi = np.linspace(0.0, 1.0, 401)
    bend = amp * np.sin(waves * math.pi * xi)
    dense = centre + (xi[:, None] - 0.5) * length * u + bend[:, None] * n
    z0 = _floor(params) + radius
    x0 = _sweep_section(_resample(dense, n_slices), section, z0)
    straight = centre + (np.linspace(0.0, 1.0, n_slices)[:, None] - 0.5) * length * u
    xg = _sweep_section(straight, section, z0)
    spacing = length / (n_slices - 1)
    vol = math.pi * radius ** 2 * spacing / section.shape[0]
    s0 = _state(x0, Material.ELASTIC, vol=vol)
    g = _state(xg, Material.ELASTIC, vol=vol)
    h = np.array([effector_half, effector_half, 0.02])
    eff = Effector((Box([lo + 0.1, lo + 0.1, _floor(params) + h[2]], h),))
    return s0, g, eff


def build_rope_scene(seed=0, params=None, horizon=10, planning_horizon=3):
    """Elastic rope of 2000 particles (0.4 m long, 0.01 m radius) lying in a
    bent pose; the goal is the straight rope along the chord."""
    p = params or DynamicsParams(dt=1e-3)
    section = _vogel_disc(20, 0.009)
    s0, g, eff = _rope(seed, p, 100, section, 0.4, 0.01, 0.025)
    return Scene(s0, g, p, eff, "rope", horizon, planning_horizon)


def build_toy_rope_scene(seed=0, params=None, horizon=10, planning_horizon=3):
    """Cheap rope-push scene for planner experiments: 208 particles (52 slices of
    a 2x2 cross-section at half-cell pitch) on the same 64^3 grid."""
    p = params or DynamicsParams(dt=1e-3)
    h = 0.25 * p.dx
    section = np.array([[-h, -h], [h, -h], [-h, h], [h, h]])
    s0, g, eff = _rope(seed, p, 52, section, 0.4, 2 * h, 0.025)
    return Scene(s0, g, p, eff, "rope", horizon, planning_horizon)


# ---------------------------------------------------------------------------
# beans
# ---------------------------------------------------------------------------


def build_beans_scene(seed=0, params=None, n=300, horizon=10, planning_horizon=1):
    """Granular beans scattered on the table; the goal packs them into a tray
    rectangle.  The tray is a target region only (no walls)."""
    p = params or DynamicsParams(dt=1e-3)
    rng = np.random.default_rng(seed)
    lo, hi = _span(p)
    mid = 0.5 * (lo + hi)
    sp = 0.5 * p.dx
    z0 = _floor(p) + 0.5 * sp
    # scatter on jittered lattice sites so no two beans overlap
    side = int(math.ceil(math.sqrt(2.5 * n)))
    sites = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"),
                     axis=-1).reshape(-1, 2)
    pick = rng.choice(len(sites), n, replace=False)
    pick.sort()
    xy = mid - 0.5 * side * 1.5 * sp + sites[pick] * 1.5 * sp
    xy = xy + rng.uniform(-0.2, 0.2, size=(n, 2)) * sp
    x0 = np.column_stack([xy, np.full(n, z0)])
    tray = mid + np.array([rng.uniform(0.12, 0.2), rng.uniform(-0.1, 0.1)])
    cols = int(math.ceil(math.sqrt(n / 2)))
    g_sites = np.stack(np.meshgrid(np.arange(cols), np.arange(2 * cols), indexing="ij"),
                       axis=-1).reshape(-1, 2)[:n]
    gxy = tray + (g_sites - 0.5 * np.array([cols, 2 * cols])) * sp
    xg = np.column_stack([gxy, np.full(n, z0)])
    vol = sp ** 3
    s0 = _state(x0, Material.GRANULAR, vol=vol)
    g = _state(xg, Material.GRANULAR, vol=vol)
    hb = np.array([0.01, 0.04, 0.02])
    eff = Effector((Box([lo + 0.1, lo + 0.1, _floor(p) + hb[2]], hb),))
    return Scene(s0, g, p, eff, "beans", horizon, planning_horizon)


def in_tray(state, scene, pad=0.0):
    """Number of particles inside the goal rectangle (xy bounding box of the goal)."""
    g = scene.goal_state.x[:, :2]
    lo = g.min(axis=0) - pad
    hi = g.max(axis=0) + pad
    x = state.x[:, :2]
    return int(np.all((x >= lo) & (x <= hi), axis=1).sum())


# ---------------------------------------------------------------------------
# cloth
# ---------------------------------------------------------------------------


def build_cloth_scene(seed=0, params=None, horizon=10, planning_horizon=3):
    """Thin 3-layer elastic slab of 1000 particles lying flat, a static rack bar
    and a two-finger gripper.  The goal drapes the cloth over the bar.

    The 40 x 25 lattice of the sheet holds one particle per column, placed on
    layer (i + j) mod 3, which makes the slab three particles thick while
    keeping the count at exactly 1000.
    """
    p = params or DynamicsParams(dt=5e-4)
    rng = np.random.default_rng(seed)
    lo, hi = _span(p)
    mid = 0.5 * (lo + hi)
    sp = 0.5 * p.dx
    nx_, ny_ = 40, 25
    i, j = np.meshgrid(np.arange(nx_), np.arange(ny_), indexing="ij")
    layer = (i + j) % 3
    off = rng.uniform(-0.03, 0.03, size=2)
    base = np.array([mid - 0.5 * nx_ * sp + off[0] - 0.12, mid - 0.5 * ny_ * sp + off[1],
                     _floor(p) + 0.5 * sp])
    x0 = base + np.stack([i * sp, j * sp, layer * sp], axis=-1).reshape(-1, 3)
    # rack: a static bar along y
    bar_h = np.array([0.01, 0.5 * ny_ * sp + 0.04, 0.01])
    bar_c = np.array([mid + 0.12, mid + off[1], _floor(p) + 0.2])
    # goal: fold the sheet over the bar, half hanging on each side
    s = (i * sp - 0.5 * nx_ * sp).reshape(-1)
    top = bar_c[2] + bar_h[2] + sp * (1 + layer.reshape(-1))
    xg = np.column_stack([
        np.full(s.size, bar_c[0]) + np.sign(s) * (bar_h[0] + sp),
        x0[:, 1],
        top - np.abs(s),
    ])
    xg[:, 2] = np.maximum(xg[:, 2], _floor(p) + 0.5 * sp)
    vol = sp ** 3
    s0 = _state(x0, Material.ELASTIC, vol=vol)
    g = _state(xg, Material.ELASTIC, vol=vol)
    fh = np.array([0.01, 0.01, 0.02])
    grip = np.array([x0[:, 0].min() + 0.01, mid + off[1], _floor(p) + 0.05])
    eff = Effector((Box(grip + [0.0, -0.02, 0.0], fh), Box(grip + [0.0, 0.02, 0.0], fh),
                    Box(bar_c, bar_h)), static=(False, False, True))
    return Scene(s0, g, p, eff, "cloth", horizon, planning_horizon)


# ---------------------------------------------------------------------------
# pouring
# ---------------------------------------------------------------------------


def _cup(center, inner, wall):
    """Open-top container as five boxes: floor plus four walls."""
    c = np.asarray(center, dtype=float)
    ix, iy, iz = inner
    boxes = [Box(c + [0, 0, -iz - wall], [ix + 2 * wall, iy + 2 * wall, wall])]
    for sx in (-1, 1):
        boxes.append(Box(c + [sx * (ix + wall), 0, 0], [wall, iy + 2 * wall, iz]))
    for sy in (-1, 1):
        boxes.append(Box(c + [0, sy * (iy + wall), 0], [ix, wall, iz]))
    return boxes


def build_pour_scene(kind="water", seed=0, params=None, horizon=10, planning_horizon=3):
    """Fluid in a source cup poured into a target bowl by Pour twists.

    ``soup`` adds five elastic chunks of 20 particles each.  The source cup
    moves with the action; the bowl is static.
    """
    if kind not in ("water", "soup"):
        raise ValidationError("pour kind must be 'water' or 'soup'")
    p = params or DynamicsParams(dt=5e-4)
    rng = np.random.default_rng(seed)
    lo, hi = _span(p)
    mid = 0.5 * (lo + hi)
    sp = 0.5 * p.dx
    wall = p.dx
    inner = np.array([0.05, 0.05, 0.05])
    src_c = np.array([mid - 0.15, mid + rng.uniform(-0.03, 0.03), _floor(p) + 0.25])
    bowl_c = np.array([mid + 0.15, mid + rng.uniform(-0.03, 0.03), _floor(p) + inner[2]
                       + 2 * wall])
    # fluid block filling the lower part of the source cup
    nx_ = int(2 * inner[0] / sp) - 1
    nz_ = 6
    g3 = np.stack(np.meshgrid(np.arange(nx_), np.arange(nx_), np.arange(nz_), indexing="ij"),
                  axis=-1).reshape(-1, 3)
    start = src_c - np.array([inner[0] - sp, inner[1] - sp, inner[2] - 0.5 * sp])
    fluid = start + g3 * sp
    mats = [np.full(len(fluid), Material.FLUID)]
    pts = [fluid]
    if kind == "soup":
        for c in range(5):
            cen = start + np.array([rng.uniform(0.2, 0.8) * 2 * inner[0],
                                    rng.uniform(0.2, 0.8) * 2 * inner[1],
                                    (nz_ + 1.5) * sp])
            blob = cen + 0.6 * sp * _fibonacci_ball(20)
            pts.append(blob)
            mats.append(np.full(20, Material.ELASTIC))
    x0 = np.concatenate(pts)
    mat = np.concatenate(mats)
    # goal: the same particles settled in the bowl (same lattice, shifted)
    xg = x0 - src_c + bowl_c
    xg[:, 2] = x0[:, 2] - src_c[2] + bowl_c[2]
    vol = sp ** 3
    s0 = ParticleState.at_rest(x0, DENSITY * vol, vol, mat)
    g = ParticleState.at_rest(xg, DENSITY * vol, vol, mat)
    boxes = _cup(src_c, inner, wall) + _cup(bowl_c, inner, wall)
    static = (False,) * 5 + (True,) * 5
    eff = Effector(tuple(boxes), static=static, pivot=src_c)
    return Scene(s0, g, p, eff, "pour_" + kind, horizon, planning_horizon)


def _fibonacci_ball(n):
    """n points roughly uniform inside the unit ball."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = math.pi * (1 + 5 ** 0.5) * i
    r = np.cbrt(i / n)
    return np.stack([r * np.cos(th) * np.sin(phi), r * np.sin(th) * np.sin(phi),
                     r * np.cos(phi)], axis=1)


BUILDERS = {
    "rope": build_rope_scene,
    "toy_rope": build_toy_rope_scene,
    "beans": build_beans_scene,
    "cloth": build_cloth_scene,
    "pour_water": lambda seed=0, **kw: build_pour_scene("water", seed, **kw),
    "pour_soup": lambda seed=0, **kw: build_pour_scene("soup", seed, **kw),
}


def build_scene(name, seed=0, **kw):
    if name not in BUILDERS:
        raise ValidationError(f"unknown scene builder {name!r}; choose from {sorted(BUILDERS)}")
    return BUILDERS[name](seed=seed, **kw)


def plan_config_for(scene, toy=False):
    """Default PlanConfig for a scene's task."""
    if toy:
        return TOY_ROPE_PLAN
    spec = TASK_SPECS.get(scene.task_tag)
    return spec.plan if spec is not None else PlanConfig()


# ---------------------------------------------------------------------------
# kinematics and demonstrations
# ---------------------------------------------------------------------------


def action_to_effector(action, task, current, params=None):
    """Effector waypoints (one per substep boundary) for ``action``.

    Push: the gripper descends at (x0, y0) and follows the 20 deltas; Sweep: a
    straight segment; PoseSeq: 8 poses with a grip channel; Pour: the twist
    integrated over the action's substeps.  Waypoints outside the domain are
    clipped with a warning.
    """
    from .core import ACTION_ARITY, TASK_ACTION

    expected = TASK_ACTION.get(task, action.kind)
    if action.kind != expected or action.values.size != ACTION_ARITY[expected]:
        raise ValidationError(f"task {task!r} expects a {expected} action")
    p = params or DynamicsParams()
    path = action_path(action, current, p, warn=True)
    out = []
    h = path.half
    for s in range(path.substeps):
        out.append(Effector(tuple(Box(path.centers[s, b], h[b], path.rotations[s, b])
                                  for b in range(h.shape[0])),
                            velocities=path.vel[s], gripper_open=current.gripper_open,
                            static=current.static, pivot=path.pivot[s, 0]
                            if h.shape[0] else None))
    out.append(path.end)
    return out


@dataclass
class Demonstration:
    states: list
    actions: list
    effectors: list

    def __post_init__(self):
        T = len(self.actions)
        if T < 1:
            raise ValidationError("a demonstration needs at least one transition")
        if len(self.states) != T + 1:
            raise ValidationError("need len(states) == len(actions) + 1")
        if len(self.effectors) not in (T, T + 1):
            raise ValidationError("need one effector per action")
        for s in self.states:
            if not s.is_finite():
                raise ValidationError("demonstration state is not finite")

    @property
    def transitions(self):
        return len(self.actions)


def generate_demos(scene, policy, params=None, n=10, seed=0, horizon=None):
    """``n`` demonstrations of ``horizon`` transitions under ``params``.

    ``policy`` is either an InitialPolicy or a factory ``f(scene, seed)``;
    with a factory every episode gets its own policy seeded ``seed + i``.
    Episodes start from the scene's initial state and effector.
    """
    if n < 1:
        raise ValidationError("need n >= 1 demonstrations")
    from .mpm import engine

    p = scene.params if params is None else params
    T = scene.task_horizon if horizon is None else horizon
    demos = []
    for ep in range(n):
        factory = isinstance(policy, type) or not hasattr(policy, "act")
        pol = policy(scene, seed + ep) if factory else policy
        s = scene.initial_state
        e = scene.effector_template
        states, actions, effs = [s], [], [e]
        for t in range(T):
            a = pol.act(s, scene.goal_state)
            s, e, _ = engine.step(s, a, e, p, record=False, step_index=t)
            states.append(s)
            actions.append(a)
            effs.append(e)
        demos.append(Demonstration(states, actions, effs[:-1]))
    return demos


def push(start, direction, length):
    """Convenience Push along a fixed heading."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return Action.push(start, np.tile(d * length / N_PUSH_DELTAS, (N_PUSH_DELTAS, 1)))


__all__ = ["TaskSpec", "TASK_SPECS", "build_rope_scene", "build_toy_rope_scene",
           "build_beans_scene", "build_cloth_scene", "build_pour_scene", "build_scene",
           "action_to_effector", "Demonstration", "generate_demos", "default_bounds",
           "particles_from_pointcloud", "in_tray", "plan_config_for", "push", "TOY_ROPE_PLAN"]


def blob_case(seed=0, n=5, n_actions=2, substeps=20):
    """Small elastic blob pushed by a two-finger gripper, for gradient checks.

    Returns (state, actions, params, effector, goal) on a coarse 20^3 grid.
    """
    rng = np.random.default_rng(seed)
    dx = 0.05
    p = DynamicsParams(E=2e3, nu=0.3, mu=0.4, dt=2e-3, dx=dx, grid_dims=(20, 20, 20),
                       substeps=substeps)
    x = np.array([0.5, 0.5, 0.0]) + rng.uniform(-0.04, 0.04, (n, 3))
    x[:, 2] = 0.17 + rng.uniform(0.0, 0.04, n)
    vol = (0.5 * dx) ** 3
    state = ParticleState.at_rest(x, DENSITY * vol, vol)
    fh = [0.02, 0.01, 0.03]
    eff = Effector((Box([0.5, 0.3, 0.18], fh), Box([0.5, 0.33, 0.18], fh)))
    actions = []
    y0 = 0.38
    for i in range(n_actions):
        d = np.column_stack([rng.uniform(-0.002, 0.002, N_PUSH_DELTAS),
                             0.005 * 0.5 ** i + rng.uniform(-0.002, 0.002, N_PUSH_DELTAS)])
        actions.append(Action.push([0.5 + rng.uniform(-0.02, 0.02), y0 + 0.02 * i], d))
    goal = ParticleState.at_rest(x + np.array([0.0, 0.1, 0.0]), DENSITY * vol, vol)
    return state, actions, p, eff, goal
