import numpy as np
import pytest
from hypothesis import given, strategies as st

from dipac.chamfer import chamfer
from dipac.core import Box, Effector, ParticleState
from dipac.cost import contact_cost, step_cost, step_costs, trajectory_cost

seeds = st.integers(0, 10_000)


def state(x):
    return ParticleState.at_rest(np.asarray(x, float).reshape(-1, 3), 1.0, 1.0)


def cloud(rng, n):
    return state(rng.random((n, 3)))


def test_midpoint_on_particle():
    s = state([[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]])
    assert contact_cost(s, np.array([0.5, 0.5, 0.5])) == 0.0


def test_three_four_five():
    assert contact_cost(state([[0, 0, 0]]), np.array([3.0, 4.0, 0.0]), radius=1e-3) == 5.0


def test_effector_midpoint_is_used():
    e = Effector((Box([2, 4, 0], [0.1] * 3), Box([4, 4, 0], [0.1] * 3)))
    assert contact_cost(state([[0, 0, 0]]), e) == 5.0
    bar = Effector((Box([2, 4, 0], [0.1] * 3),), static=(True,))
    assert contact_cost(state([[0, 0, 0]]), bar) == 0.0


@given(seeds)
def test_contact_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = cloud(rng, int(rng.integers(1, 60)))
    m = rng.random(3) * 2 - 0.5
    expect = np.sqrt(((s.x - m) ** 2).sum(axis=1)).min()
    got = contact_cost(s, m)
    assert got >= 0.0
    assert abs(got - expect) <= 1e-12


def test_step_cost_examples():
    rng = np.random.default_rng(0)
    prev, goal = cloud(rng, 20), cloud(rng, 25)
    m = np.array([0.5, 0.5, 0.5])
    assert step_cost(prev, prev, goal, m).chamfer_delta == 0.0
    bd = step_cost(prev, goal, goal, m)
    assert bd.chamfer_delta == -chamfer(prev, goal) < 0


@given(seeds, st.floats(0.0, 10.0))
def test_step_cost_direct(seed, w):
    rng = np.random.default_rng(seed)
    prev, nxt, goal = cloud(rng, 15), cloud(rng, 15), cloud(rng, 10)
    m = rng.random(3)
    bd = step_cost(prev, nxt, goal, m, w)
    assert bd.chamfer_delta == chamfer(nxt, goal) - chamfer(prev, goal)
    assert bd.contact == pytest.approx(w * contact_cost(prev, m), abs=1e-15)
    assert bd.total == bd.chamfer_delta + bd.contact


@given(seeds, st.integers(1, 8))
def test_telescoping_and_sign(seed, T):
    rng = np.random.default_rng(seed)
    states = [cloud(rng, 12) for _ in range(T + 1)]
    goal = cloud(rng, 12)
    effs = [rng.random(3) for _ in range(T)]
    total = trajectory_cost(states, effs, goal, contact_weight=0.0)
    diff = chamfer(states[-1], goal) - chamfer(states[0], goal)
    assert abs(total - diff) <= 1e-9
    assert (total < 0) == (diff < 0)


def test_single_step_and_stationary():
    rng = np.random.default_rng(3)
    a, b, goal = cloud(rng, 10), cloud(rng, 10), cloud(rng, 10)
    m = rng.random(3)
    assert trajectory_cost([a, b], [m], goal) == step_cost(a, b, goal, m).total
    assert trajectory_cost([a] * 5, [m] * 4, goal, contact_weight=0.0) == 0.0


def test_step_costs_breakdown():
    rng = np.random.default_rng(4)
    states = [cloud(rng, 8) for _ in range(4)]
    goal = cloud(rng, 8)
    effs = [rng.random(3) for _ in range(3)]
    rows = step_costs(states, effs, goal, 0.3)
    assert sum(r.total for r in rows) == pytest.approx(trajectory_cost(states, effs, goal, 0.3))
