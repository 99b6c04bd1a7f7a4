import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dipac.core import (Action, Box, DomainEscape, DynamicsParams, Effector, Material,
                        ParticleState)
from dipac.kinematics import EffectorPath, action_path
from dipac.mpm import engine

from conftest import blob

P0 = DynamicsParams(gravity=(0.0, 0.0, 0.0))
inside = st.floats(0.1, 0.9)


def fresh_grid(p=P0):
    return engine.Grid(p.grid_dims, p.dx)


def random_state(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, (n, 3))
    return ParticleState(x, rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3)),
                         np.eye(3) + 0.05 * rng.normal(size=(n, 3, 3)),
                         rng.uniform(0.5, 2.0, n) * 1e-3, np.full(n, 1e-6),
                         rng.integers(0, 3, n))


# -- B-spline stencil ------------------------------------------------------


def test_node_centre_profile():
    node = np.array([20, 31, 40])
    idx, w = engine.bspline_weights(node * P0.dx, P0)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    prof = {}
    for i, wi in zip(idx, w):
        prof[tuple(i - node)] = wi
    assert prof[(0, 0, 0)] == pytest.approx(0.75 ** 3, abs=1e-15)
    assert prof[(-1, 0, 0)] == pytest.approx(0.125 * 0.75 ** 2, abs=1e-15)
    assert prof[(1, 1, 1)] == pytest.approx(0.125 ** 3, abs=1e-15)


@given(inside, inside, inside)
def test_partition_of_unity_and_first_moment(a, b, c):
    xp = np.array([a, b, c])
    idx, w = engine.bspline_weights(xp, P0)
    assert abs(w.sum() - 1.0) <= 1e-14
    moment = (w[:, None] * (idx * P0.dx - xp)).sum(axis=0)
    assert np.abs(moment).max() <= 1e-12


def test_stencil_rejects_outside():
    with pytest.raises(DomainEscape):
        engine.bspline_weights([0.0, 0.5, 0.5], P0)


# -- constitutive model ----------------------------------------------------


@pytest.mark.parametrize("mat", list(Material))
def test_rest_stress_is_zero(mat):
    assert not np.any(engine.stress(np.eye(3), P0, mat))


def test_small_strain_matches_linear_elasticity():
    e = 1e-6
    mu, lam = P0.lame
    P = engine.stress(np.diag([1 + e, 1.0, 1.0]), P0)
    lin = np.diag([2 * mu + lam, lam, lam]) * e
    assert np.abs(P - lin).max() <= 1e-4 * np.abs(lin).max()


def test_fluid_compression_pushes_outward():
    s = 0.9
    F = np.eye(3) * s
    P = engine.stress(F, P0, Material.FLUID)
    FinvT = np.linalg.inv(F).T
    c = P[0, 0] / FinvT[0, 0]
    assert c > 0
    assert np.abs(P - c * FinvT).max() <= 1e-12 * abs(P[0, 0])


def test_inverted_elastic_is_clamped_and_finite():
    P = engine.stress(np.diag([1.0, 1.0, -0.5]), P0)
    assert np.isfinite(P).all()


# -- transfers -------------------------------------------------------------


def test_single_particle_at_rest():
    s = ParticleState.at_rest([[0.5, 0.5, 0.5]], 2e-3, 1e-6)
    g = fresh_grid()
    engine.p2g(s, g, P0)
    assert not g.momentum.any()
    assert g.mass.sum() == pytest.approx(2e-3, rel=1e-15)


@given(st.integers(0, 10_000), st.integers(1, 300))
def test_p2g_conserves_mass_and_momentum(seed, n):
    s = random_state(seed, n)
    g = fresh_grid()
    engine.p2g(s, g, P0)
    total_m = math.fsum(s.mass)
    assert abs(math.fsum(g.mass) - total_m) <= 4 * np.finfo(float).eps * total_m
    mom = (s.mass[:, None] * s.v).sum(axis=0)
    gm = np.array([math.fsum(g.momentum[:, k]) for k in range(3)])
    assert np.abs(gm - mom).max() <= 1e-12 * np.abs(mom).max()


def test_gravity_on_isolated_node():
    p = DynamicsParams()
    g = fresh_grid(p)
    k = (32 * 64 + 32) * 64 + 32
    g.mass[k] = 1.0
    g.momentum[k] = [0.2, 0.0, 0.0]
    g.active[0] = k
    g.n_active = 1
    engine.grid_update(g, p)
    assert np.array_equal(g.velocity[k], [0.2, 0.0, -9.8 * p.dt])


def floor_node(p, v):
    g = fresh_grid(p)
    k = (32 * 64 + 32) * 64 + 1  # z index inside the wall margin
    g.mass[k] = 1.0
    g.momentum[k] = v
    g.active[0] = k
    g.n_active = 1
    engine.grid_update(g, p)
    return g.velocity[k]


def test_floor_frictionless_slip():
    v = floor_node(P0.with_(mu=0.0), [0.3, -0.1, -0.5])
    assert v[2] == 0.0
    assert v[:2].tolist() == [0.3, -0.1]


def test_floor_static_friction():
    v = floor_node(P0.with_(mu=10.0), [0.3, -0.1, -0.5])
    assert not v.any()


def test_floor_kinetic_friction_scales_tangent():
    mu = 0.5
    vin = np.array([0.6, 0.8, -0.4])  # |v_t| = 1, |v_n| = 0.4
    v = floor_node(P0.with_(mu=mu), vin)
    assert v[2] == 0.0
    assert v[:2] == pytest.approx(vin[:2] * (1 - mu * 0.4), abs=1e-15)


def test_uniform_grid_velocity_gather():
    s = random_state(1, 50)
    g = fresh_grid()
    u = np.array([0.1, -0.3, 0.7])
    g.velocity[:] = u
    out = engine.g2p(s, g, P0)
    assert np.abs(out.v - u).max() <= 1e-14
    assert np.abs(out.C).max() <= 1e-12


def test_zero_grid_velocity_gather():
    s = random_state(2, 50)
    out = engine.g2p(s, fresh_grid(), P0)
    assert np.array_equal(out.x, s.x)
    assert not out.C.any() and not out.v.any()


@given(st.integers(0, 1000))
def test_rigid_translation_round_trip(seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, 3)
    s = blob(30, seed, v=np.tile(u, (30, 1)))
    g = fresh_grid()
    F = engine.p2g(s, g, P0)
    engine.grid_update(g, P0)
    out = engine.g2p(s, g, P0, F)
    assert np.abs(out.v - u).max() <= 1e-12


# -- step and rollout ------------------------------------------------------


def pusher():
    return Effector((Box([0.3, 0.3, 0.5], [0.02, 0.02, 0.02]),))


def test_zero_push_is_rest_fixed_point():
    s = blob(40)
    a = Action.push([0.3, 0.3], np.zeros(40))
    out, _, _ = engine.step(s, a, pusher(), P0, record=False)
    for f in ("x", "v", "C", "F"):
        assert np.abs(getattr(out, f) - getattr(s, f)).max() <= 1e-12


def test_sweep_missing_particles_leaves_them():
    s = blob(40, radius=0.03)
    a = Action.sweep([0.2, 0.2], [0.25, 0.3])
    out, end, _ = engine.step(s, a, pusher(), P0, record=False)
    assert np.abs(out.x - s.x).max() <= 1e-9
    assert end.boxes[0].center[:2] == pytest.approx([0.25, 0.3], abs=1e-12)


def test_free_fall_matches_ballistic():
    p = DynamicsParams(dt=2e-4, substeps=100)
    s = blob(50, center=(0.5, 0.5, 0.6), radius=0.02)
    z0 = s.x[:, 2].mean()
    out, _ = engine.advance(s, EffectorPath.empty(p.substeps), p, record=False)
    t = p.substeps * p.dt
    drop = z0 - out.x[:, 2].mean()
    assert drop == pytest.approx(0.5 * 9.8 * t * t, rel=0.02)


def test_single_action_rollout_has_two_states(small_case):
    state, actions, p, eff, _ = small_case
    states, effs, traces = engine.rollout(state, actions[:1], p, eff)
    assert len(states) == 2 and len(effs) == 2 and len(traces) == 1
    assert len(traces[0]) == p.substeps


def test_rollout_is_deterministic(small_case):
    state, actions, p, eff, _ = small_case
    a = engine.rollout(state, actions, p, eff, record=False)[0]
    b = engine.rollout(state, actions, p, eff, record=False)[0]
    assert all(x.bitwise_equal(y) for x, y in zip(a, b))


def test_rollout_composes(small_case):
    state, actions, p, eff, _ = small_case
    full, effs, _ = engine.rollout(state, actions, p, eff, record=False)
    first, e1, _ = engine.rollout(state, actions[:1], p, eff, record=False)
    rest, _, _ = engine.rollout(first[-1], actions[1:], p, e1[-1], record=False)
    assert full[-1].bitwise_equal(rest[-1])


@given(st.integers(0, 1000))
def test_galilean_shift_of_rest_blob(seed):
    rng = np.random.default_rng(seed)
    p = DynamicsParams(wall_margin=0)
    u = np.append(rng.uniform(-0.5, 0.5, 2), 0.0)
    s = blob(30, seed, radius=0.03)
    eff = Effector((Box([0.3, 0.3, 0.3], [0.02, 0.02, 0.02]),))
    a = Action.sweep([0.3, 0.3], [0.32, 0.3])
    T = p.substeps * p.dt
    shifted = Action.sweep([0.3, 0.3], [0.32, 0.3] + u[:2] * T)
    base, _, _ = engine.step(s, a, eff, p, record=False)
    moved, _, _ = engine.step(s.replace(v=s.v + u), shifted, eff, p, record=False)
    assert np.abs(moved.x - base.x - u * T).max() <= 1e-9


def test_effector_path_interpolates_sweep():
    p = P0
    path = action_path(Action.sweep([0.2, 0.3], [0.4, 0.5]), pusher(), p)
    S = p.substeps
    c = path.centers[:, 0, :2]
    expect = np.array([0.2, 0.3]) + np.outer(np.arange(S) / S, [0.2, 0.2])
    assert np.abs(c - expect).max() <= 1e-12
