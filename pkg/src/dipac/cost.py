"""Step and trajectory costs: Chamfer progress toward the goal plus contact."""
from dataclasses import dataclass

import numpy as np

from .chamfer import chamfer, nearest
from .core import ParticleState, ValidationError


@dataclass(frozen=True)
class CostBreakdown:
    chamfer_delta: float
    contact: float
    total: float


def _contact(x, m, radius):
    d2, idx = nearest(np.asarray(m, dtype=np.float64).reshape(1, 3), x)
    d = float(np.sqrt(d2[0]))
    if d <= radius:
        return 0.0, int(idx[0])
    return d, int(idx[0])


def contact_cost(state, effector, radius=0.0):
    """Distance from the gripper midpoint to the nearest particle.

    ``effector`` is an Effector or a bare 3-vector.  Returns 0 within
    ``radius`` (normally the grid spacing) and for effectors with no moving
    boxes.
    """
    m = effector if not hasattr(effector, "midpoint") else effector.midpoint()
    if m is None:
        return 0.0
    x = state.x if isinstance(state, ParticleState) else np.asarray(state, dtype=np.float64)
    return _contact(np.ascontiguousarray(x), m, radius)[0]


def step_cost(prev, nxt, goal, effector, contact_weight=1.0, radius=0.0):
    """Chamfer change caused by one action plus weighted pre-action contact."""
    delta = chamfer(nxt, goal) - chamfer(prev, goal)
    zeta = contact_weight * contact_cost(prev, effector, radius) if contact_weight else 0.0
    return CostBreakdown(delta, zeta, delta + zeta)


def trajectory_cost(states, effectors, goal, contact_weight=1.0, radius=0.0):
    """Sum of step costs; ``effectors[t]`` is the gripper pose for action t."""
    if len(states) != len(effectors) + 1:
        raise ValidationError("need exactly one effector per transition")
    total = 0.0
    for t in range(len(effectors)):
        total += step_cost(states[t], states[t + 1], goal, effectors[t],
                           contact_weight, radius).total
    return total


def step_costs(states, effectors, goal, contact_weight=1.0, radius=0.0):
    """Per-step CostBreakdown list (for metrics CSVs)."""
    if len(states) != len(effectors) + 1:
        raise ValidationError("need exactly one effector per transition")
    return [step_cost(states[t], states[t + 1], goal, effectors[t], contact_weight, radius)
            for t in range(len(effectors))]
