import numpy as np
import pytest

from dipac import io as dio
from dipac.calibration import prediction_loss
from dipac.chamfer import chamfer
from dipac.core import Action, Effector, ParticleState, ValidationError
from dipac.kinematics import N_POSES, N_PUSH_DELTAS
from dipac.mpm import engine
from dipac.planner import GreedyHeuristicPolicy, RandomPolicy
from dipac.tasks import (BUILDERS, TASK_SPECS, action_to_effector, build_beans_scene,
                         build_scene, build_toy_rope_scene, generate_demos, in_tray)

NAMES = sorted(BUILDERS)


def same_scene(a, b):
    return (a.initial_state.bitwise_equal(b.initial_state)
            and a.goal_state.bitwise_equal(b.goal_state) and a.params == b.params
            and dio.effector_to_dict(a.effector_template)
            == dio.effector_to_dict(b.effector_template))


@pytest.mark.parametrize("name", NAMES)
def test_builders(name):
    a = build_scene(name, seed=3)
    assert same_scene(a, build_scene(name, seed=3))
    assert not same_scene(a, build_scene(name, seed=4))
    assert chamfer(a.initial_state, a.goal_state) > 0
    p = a.params
    lo = p.wall_margin * p.dx  # walls occupy the outer wall_margin nodes
    hi = (np.asarray(p.grid_dims) - p.wall_margin - 1) * p.dx
    for s in (a.initial_state, a.goal_state):
        assert np.all(s.x >= lo) and np.all(s.x <= hi)
    spec = TASK_SPECS.get(name)
    if spec is not None:
        assert a.initial_state.n == spec.n_particles
        assert a.planning_horizon == spec.plan.H


def test_unknown_builder():
    with pytest.raises(ValidationError):
        build_scene("origami")


@pytest.mark.parametrize("name", NAMES)
def test_scene_steps(name):
    sc = build_scene(name, seed=1)
    a = GreedyHeuristicPolicy(sc).act(sc.initial_state, sc.goal_state)
    nxt, _, _ = engine.step(sc.initial_state, a, sc.effector_template, sc.params,
                            record=False)
    assert nxt.is_finite()


def centers(e):
    return np.array([b.center for b in e.boxes])


def test_zero_push_waypoints_stay_at_start():
    sc = build_toy_rope_scene(0)
    a = Action.push([0.3, 0.4], np.zeros(2 * N_PUSH_DELTAS))
    wps = action_to_effector(a, "rope", sc.effector_template, sc.params)
    assert len(wps) == sc.params.substeps + 1
    first = centers(wps[0])
    assert first[0, :2] == pytest.approx([0.3, 0.4])
    assert all(np.array_equal(centers(w), first) for w in wps)


def test_sweep_waypoints_interpolate():
    sc = build_beans_scene(0)
    a, b = np.array([0.3, 0.3]), np.array([0.5, 0.6])
    wps = action_to_effector(Action.sweep(a, b), "beans", sc.effector_template, sc.params)
    S = len(wps) - 1
    for s, w in enumerate(wps):
        assert centers(w)[0, :2] == pytest.approx(a + (b - a) * s / S, abs=1e-12)


def test_zero_twist_pour_keeps_pose():
    sc = build_scene("pour_water", 0)
    cur = sc.effector_template
    wps = action_to_effector(Action("pour", np.zeros(6)), "pour_water", cur, sc.params)
    for w in wps:
        assert np.array_equal(centers(w), centers(cur))
        for b, b0 in zip(w.boxes, cur.boxes):
            assert np.abs(b.rotation - b0.rotation).max() <= 1e-15


def test_poseseq_waypoints_reach_poses():
    sc = build_scene("cloth", 0)
    a = GreedyHeuristicPolicy(sc).act(sc.initial_state, sc.goal_state)
    wps = action_to_effector(a, "cloth", sc.effector_template, sc.params)
    last = a.values.reshape(N_POSES, 4)[-1, :3]
    mid = centers(wps[-1])[:2].mean(axis=0)
    assert mid == pytest.approx(last, abs=1e-9)


def test_wrong_action_kind_rejected():
    sc = build_toy_rope_scene(0)
    with pytest.raises(ValidationError):
        action_to_effector(Action.sweep([0, 0], [1, 1]), "rope", sc.effector_template)


def test_out_of_domain_waypoints_clipped(caplog):
    sc = build_toy_rope_scene(0)
    a = Action.push([0.01, 0.5], np.zeros(2 * N_PUSH_DELTAS))
    with caplog.at_level("WARNING"):
        wps = action_to_effector(a, "rope", sc.effector_template, sc.params)
    lo, _ = sc.params.domain
    assert centers(wps[0])[0, 0] >= lo[0]
    assert "clipped" in caplog.text


@pytest.fixture(scope="module")
def demo_scene():
    return build_toy_rope_scene(2, horizon=2, planning_horizon=1)


@pytest.fixture(scope="module")
def demos(demo_scene):
    return generate_demos(demo_scene, RandomPolicy, n=10, seed=5)


def test_generate_demos_shape(demos, demo_scene):
    assert len(demos) == 10
    assert all(d.transitions == demo_scene.task_horizon for d in demos)
    starts = {tuple(d.actions[0].values) for d in demos}
    assert len(starts) == 10  # per-episode policy seeds


def test_demo_replay_is_self_consistent(demos, demo_scene):
    assert prediction_loss(demos, demo_scene.params) <= 1e-10


def test_demo_files_byte_identical(demo_scene, tmp_path):
    paths = []
    for k in range(2):
        d = generate_demos(demo_scene, RandomPolicy, n=2, seed=9, horizon=1)
        paths.append(tmp_path / f"d{k}.jsonl")
        dio.write_demos(paths[-1], d)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_demo_requires_positive_count(demo_scene):
    with pytest.raises(ValidationError):
        generate_demos(demo_scene, RandomPolicy, n=0)


@pytest.mark.parametrize("seed", range(5))
def test_moving_a_bean_into_the_tray_lowers_chamfer(seed):
    sc = build_beans_scene(seed)
    s, g = sc.initial_state, sc.goal_state
    c0 = chamfer(s, g)
    centre = g.x[:, :2].mean(axis=0)
    far = np.argsort(-np.linalg.norm(s.x[:, :2] - centre, axis=1))[:10]
    target = g.x[np.argmin(np.linalg.norm(g.x[:, :2] - centre, axis=1))]
    for i in far:
        x = s.x.copy()
        x[i] = target
        moved = s.replace(x=x)
        assert in_tray(moved, sc) == in_tray(s, sc) + 1
        assert chamfer(moved, g) < c0
