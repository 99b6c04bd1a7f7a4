"""Trajectory-tree MPC: k random roots plus one policy root, policy-guided
H-step rollouts, gradient refinement of every branch, and argmin selection.

Branches are independent, so ``plan_step`` optimises them on a thread pool
(the MPM kernels release the GIL).  Selection is a deterministic reduction by
(cost, candidate index), so results do not depend on the thread count.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GradientError, TrajectoryCost, grad_rollout
from .chamfer import chamfer, nearest
from .core import Action, DipacError, Effector, SimulationError, ValidationError
from .cost import step_cost
from .kinematics import N_POSES, N_PUSH_DELTAS, start_midpoint
from .mpm import engine

log = logging.getLogger(__name__)

POLICY = "policy"
RANDOM = "random"


def thread_count(requested=None):
    """Worker count from ``requested`` or ``DIPAC_THREADS`` (0 or unset = all CPUs)."""
    n = requested
    if n is None:
        raw = os.environ.get("DIPAC_THREADS", "0").strip() or "0"
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"DIPAC_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValidationError("thread count must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class PlanConfig:
    k: int = 15
    H: int = 3
    opt_iters: int = 3
    eta: float = 0.1
    seed: int = 0
    contact_weight: float = 1.0
    threads: int = None

    def __post_init__(self):
        if self.k < 0 or self.H < 1 or self.opt_iters < 0:
            raise ValidationError("need k >= 0, H >= 1, opt_iters >= 0")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class TrajectoryCandidate:
    actions: list
    states: list
    cost_pre_opt: float
    cost_post_opt: float
    origin: str
    effectors: list = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# action sampling and policies
# ---------------------------------------------------------------------------


def _bounds(scene):
    from .tasks import default_bounds

    return scene.bounds if scene.bounds is not None else default_bounds(scene)


def standoff(scene):
    """Distance from a contact point back to the pusher centre, plus one cell."""
    eff = scene.effector_template
    moving = [b for b, s in zip(eff.boxes, eff.static) if not s]
    if not moving:
        return scene.params.dx
    r = max(float(np.hypot(*b.half_extents[:2])) for b in moving)
    return r + scene.params.dx


def _support(scene, d):
    """Extent of the moving boxes along the planar direction d (front face offset)."""
    eff = scene.effector_template
    s = 0.0
    for b, st in zip(eff.boxes, eff.static):
        if not st:
            h = b.half_extents
            R = b.rotation
            s = max(s, sum(h[k] * abs(R[0, k] * d[0] + R[1, k] * d[1]) for k in range(3)))
    return s


def _push_or_sweep(scene, point, direction, length):
    """Straight push/sweep that brings the pusher's front face from just behind
    ``point`` to ``length`` beyond it, along ``direction``."""
    lo, hi = _bounds(scene)
    d = np.asarray(direction, dtype=np.float64)[:2]
    n = np.hypot(*d)
    d = d / n if n > 0 else np.zeros(2)
    off = standoff(scene)
    start = np.asarray(point, dtype=np.float64)[:2] - off * d
    travel = max(length + off - _support(scene, d), 0.0) if n > 0 else 0.0
    if scene.action_kind == "push":
        deltas = np.tile(travel / N_PUSH_DELTAS * d, (N_PUSH_DELTAS, 1))
        vals = np.concatenate([start, deltas.ravel()])
    else:
        vals = np.concatenate([start, start + travel * d])
    return Action(scene.action_kind, np.clip(vals, lo, hi))


def _max_travel(scene):
    lo, hi = _bounds(scene)
    if scene.action_kind == "push":
        return float(np.min(np.maximum(np.abs(lo[2:]), np.abs(hi[2:])))) * N_PUSH_DELTAS
    return float(np.min(hi[:2] - lo[:2]))


def sample_random_action(state, scene, rng):
    """Random action as used for the tree's exploration branches.

    Push/Sweep: a uniformly chosen particle, a uniform heading, and a travel
    length uniform in [0, max]; the pusher starts one standoff behind the
    particle so that it does not begin inside the object.  PoseSeq/Pour:
    uniform within the per-coordinate bounds.
    """
    lo, hi = _bounds(scene)
    kind = scene.action_kind
    if kind in ("push", "sweep"):
        p = int(rng.integers(state.n))
        th = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(0.0, _max_travel(scene) - standoff(scene)) \
            if _max_travel(scene) > standoff(scene) else 0.0
        return _push_or_sweep(scene, state.x[p], (math.cos(th), math.sin(th)), length)
    return Action(kind, rng.uniform(lo, hi))


class InitialPolicy:
    """Maps (state, goal) to an action for the scene's task."""

    def act(self, state, goal):
        raise NotImplementedError


class RandomPolicy(InitialPolicy):
    def __init__(self, scene, seed=0):
        self.scene = scene
        self.rng = np.random.default_rng(seed)

    def act(self, state, goal):
        return sample_random_action(state, self.scene, self.rng)


class GreedyHeuristicPolicy(InitialPolicy):
    """Push the worst-placed particle onto its nearest goal point.

    Every particle is matched to its nearest goal particle; the one with the
    longest mismatch vector is pushed (or swept) along that vector.  PoseSeq
    picks it up and carries it; Pour translates toward the goal centroid.
    """

    def __init__(self, scene):
        self.scene = scene

    def mismatch(self, state, goal):
        x = np.ascontiguousarray(state.x)
        g = np.ascontiguousarray(goal.x if hasattr(goal, "x") else goal, dtype=np.float64)
        _, idx = nearest(x, g)
        m = g[idx] - x
        length = np.einsum("ij,ij->i", m, m)
        p = int(np.argmax(length))  # first maximum on ties
        return p, m[p]

    def act(self, state, goal):
        scene = self.scene
        kind = scene.action_kind
        lo, hi = _bounds(scene)
        p, m = self.mismatch(state, goal)
        x = state.x[p]
        if kind in ("push", "sweep"):
            length = float(np.hypot(m[0], m[1]))
            if length == 0.0:
                return _push_or_sweep(scene, x, (0.0, 0.0), 0.0)
            return _push_or_sweep(scene, x, m[:2], length)
        if kind == "poseseq":
            target = x + m
            lift = np.array([0.0, 0.0, 2.0 * scene.params.dx])
            rows = []
            for i in range(N_POSES):
                f = i / (N_POSES - 1)
                if i == 0:
                    rows.append([*x, 0.0])  # arrive open
                elif i == N_POSES - 1:
                    rows.append([*target, 0.0])  # release
                else:
                    rows.append([*(x + f * m + lift * math.sin(math.pi * f)), 1.0])
            return Action(kind, np.clip(np.ravel(rows), lo, hi))
        if kind == "pour":
            gc = np.asarray(goal.x if hasattr(goal, "x") else goal).mean(axis=0)
            dur = scene.params.dt * scene.params.substeps
            v = (gc - state.x.mean(axis=0)) / dur
            return Action(kind, np.clip(np.concatenate([v, np.zeros(3)]), lo, hi))
        raise ValidationError(f"no heuristic for action kind {kind!r}")


# ---------------------------------------------------------------------------
# tree construction and refinement
# ---------------------------------------------------------------------------


def _loss(goal, cfg):
    return TrajectoryCost(goal, cfg.contact_weight)


def _rollout_policy(state, effector, root, policy, goal, H, params):
    """Root action followed by H-1 policy actions.  Returns (actions, states, effectors)."""
    actions = [root]
    states = [state]
    effectors = [effector]
    s, e = state, effector
    for t in range(H):
        a = actions[t]
        s, e, _ = engine.step(s, a, e, params, record=False, step_index=t)
        states.append(s)
        effectors.append(e)
        if t + 1 < H:
            actions.append(policy.act(s, goal))
    return actions, states, effectors


def build_tree(state, goal, policy, cfg, params, scene, effector=None, rng=None):
    """k+1 candidates: index 0 roots at the policy action, 1..k at random ones."""
    effector = scene.effector_template if effector is None else effector
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    roots = [(POLICY, policy.act(state, goal))]
    roots += [(RANDOM, sample_random_action(state, scene, rng)) for _ in range(cfg.k)]
    loss = _loss(goal, cfg)
    out = []
    for i, (origin, root) in enumerate(roots):
        try:
            actions, states, effectors = _rollout_policy(state, effector, root, policy, goal,
                                                         cfg.H, params)
        except SimulationError as e:
            log.warning("candidate %d discarded: %s", i, e)
            continue
        cost = loss.evaluate(states, effectors, actions, params)[0]
        out.append(TrajectoryCandidate(actions, states, cost, cost, origin, effectors))
    if not out:
        raise DipacError("every tree candidate failed to roll out")
    return out


def optimize_candidate(c, goal, cfg, params, scene=None, effector=None):
    """``cfg.opt_iters`` rounds of u <- u - eta dJ/du on all H actions at once.

    The best action sequence seen (including the initial one) is kept.
    """
    if cfg.opt_iters == 0:
        return c
    state = c.states[0]
    effector = c.effectors[0] if effector is None else effector
    loss = _loss(goal, cfg)
    best = (c.cost_pre_opt, c.actions, c.states, c.effectors)
    actions = list(c.actions)
    clip = scene.clip if scene is not None else (lambda a: a)
    for it in range(cfg.opt_iters):
        try:
            rep = grad_rollout(state, actions, params, loss, effector)
        except (GradientError, SimulationError) as e:
            log.info("optimisation stopped at round %d: %s", it, e)
            break
        if rep.loss < best[0]:
            best = (rep.loss, actions, rep.states, rep.effectors)
        actions = [clip(a.with_values(a.values - cfg.eta * g))
                   for a, g in zip(actions, rep.d_actions)]
    else:
        try:
            states, effectors, _ = engine.rollout(state, actions, params, effector,
                                                  record=False)
            cost = loss.evaluate(states, effectors, actions, params)[0]
            if cost < best[0]:
                best = (cost, actions, states, effectors)
        except SimulationError as e:
            log.info("final re-rollout failed: %s", e)
    return TrajectoryCandidate(list(best[1]), list(best[2]), c.cost_pre_opt, best[0],
                               c.origin, list(best[3]))


def plan_step(state, goal, policy, cfg, params, scene, effector=None, rng=None):
    """First action of the cheapest refined candidate, plus diagnostics."""
    effector = scene.effector_template if effector is None else effector
    tree = build_tree(state, goal, policy, cfg, params, scene, effector, rng)
    workers = min(thread_count(cfg.threads), len(tree))
    if workers > 1 and cfg.opt_iters > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(
                lambda c: optimize_candidate(c, goal, cfg, params, scene, effector), tree))
    else:
        done = [optimize_candidate(c, goal, cfg, params, scene, effector) for c in tree]
    best = min(range(len(done)), key=lambda i: (done[i].cost_post_opt, i))
    diag = {
        "chosen": best,
        "origin": done[best].origin,
        "cost": done[best].cost_post_opt,
        "costs_pre": [c.cost_pre_opt for c in done],
        "costs_post": [c.cost_post_opt for c in done],
    }
    return done[best].actions[0], diag


def contact_point(action, effector, params):
    """Gripper reference point for the contact term: the action's start pose."""
    return start_midpoint(action, effector, params)[0]


def mpc_run(scene, policy, cfg, params=None, on_step=None):
    """Receding-horizon loop over ``scene.task_horizon`` actions.

    Plans with ``params`` (the model, e.g. a calibrated one) and executes with
    ``scene.params`` (the world).  The lookahead shrinks to the steps left
    once fewer than ``cfg.H`` remain.  A simulation failure ends the episode early.
    Returns a dict with states, actions, chamfer_to_goal (length T+1 when
    complete), per-step metrics and planner diagnostics.
    """
    model = scene.params if params is None else params
    goal = scene.goal_state
    state = scene.initial_state
    eff = scene.effector_template
    rec = {"states": [state], "actions": [], "effectors": [eff],
           "chamfer_to_goal": [chamfer(state, goal)], "metrics": [], "diagnostics": [],
           "failed": None}
    for t in range(scene.task_horizon):
        rng = np.random.default_rng([cfg.seed, t])
        left = scene.task_horizon - t
        step_cfg = cfg if cfg.H <= left else cfg.with_(H=left)
        try:
            a, diag = plan_step(state, goal, policy, step_cfg, model, scene, eff, rng)
            nxt, eff_next, _ = engine.step(state, a, eff, scene.params, record=False,
                                           step_index=t)
        except (SimulationError, DipacError) as e:
            log.warning("episode ended at step %d: %s", t, e)
            rec["failed"] = {"step": t, "error": str(e)}
            break
        m = contact_point(a, eff, scene.params)
        bd = step_cost(state, nxt, goal, m if m is not None else Effector(()),
                       cfg.contact_weight, scene.params.dx)
        c = chamfer(nxt, goal)
        rec["metrics"].append({"step": t, "chamfer_to_goal": c,
                               "chamfer_delta": bd.chamfer_delta, "contact": bd.contact,
                               "total": bd.total})
        rec["actions"].append(a)
        rec["diagnostics"].append(diag)
        rec["chamfer_to_goal"].append(c)
        state, eff = nxt, eff_next
        rec["states"].append(state)
        rec["effectors"].append(eff)
        if on_step is not None:
            on_step(t, rec)
    return rec


def policy_episode(scene, policy, params=None):
    """Pure-policy baseline: act, step, repeat (no tree, no optimisation)."""
    cfg = PlanConfig(k=0, H=1, opt_iters=0)
    return mpc_run(scene, policy, cfg, params)
