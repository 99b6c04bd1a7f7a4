import json
import os
import re

import numpy as np
import pytest

from dipac import cli
from dipac import io as dio
from dipac.core import DynamicsParams, ValidationError
from dipac.mpm import engine
from dipac.planner import RandomPolicy
from dipac.tasks import build_scene, build_toy_rope_scene, generate_demos


@pytest.fixture(scope="module")
def scene():
    return build_toy_rope_scene(1, horizon=2, planning_horizon=1)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- serialization -------------------------------------------------------------


@pytest.mark.parametrize("name", ["toy_rope", "cloth", "pour_soup"])
def test_scene_round_trip(tmp_path, name):
    sc = build_scene(name, 0)
    path = tmp_path / "scene.json"
    dio.save_scene(path, sc)
    back = dio.load_scene(path)
    assert back.initial_state.bitwise_equal(sc.initial_state)
    assert back.goal_state.bitwise_equal(sc.goal_state)
    assert back.params == sc.params and back.task_tag == sc.task_tag
    assert dio.effector_to_dict(back.effector_template) == \
        dio.effector_to_dict(sc.effector_template)


def test_scene_json_fields(scene):
    d = dio.scene_to_dict(scene)
    for key in ("params", "initial_particles", "goal_particles", "effector", "task",
                "horizons"):
        assert key in d
    assert len(d["initial_particles"][0]) == 7


def test_scene_missing_field_rejected(scene):
    d = dio.scene_to_dict(scene)
    del d["effector"]
    with pytest.raises(ValidationError):
        dio.scene_from_dict(d)


def test_params_round_trip(tmp_path):
    p = DynamicsParams(E=1234.5, mu=0.25, grid_dims=(32, 32, 32))
    dio.save_params(tmp_path / "p.json", p)
    assert dio.load_params(tmp_path / "p.json") == p
    (tmp_path / "wrapped.json").write_text(json.dumps({"params": p.to_dict()}))
    assert dio.load_params(tmp_path / "wrapped.json") == p
    with pytest.raises(ValidationError):
        DynamicsParams.from_dict({"E": 1.0, "colour": "red"})


def test_demo_jsonl_round_trip(tmp_path, scene):
    demos = generate_demos(scene, RandomPolicy, n=2, seed=1)
    path = tmp_path / "demos.jsonl"
    dio.write_demos(path, demos)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) == {"demo_id", "t", "state", "action", "effector", "next_state"}
    back = dio.read_demos(path)
    for a, b in zip(demos, back):
        assert all(x.bitwise_equal(y) for x, y in zip(a.states, b.states))
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a.actions, b.actions))


def test_bad_demo_file(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(ValidationError):
        dio.read_demos(p)


def test_ply_and_csv(scene, tmp_path):
    s = scene.initial_state
    dio.export_ply(tmp_path / "a.ply", s)
    text = (tmp_path / "a.ply").read_text().splitlines()
    assert f"element vertex {s.n}" in text
    body = np.array([[float(v) for v in ln.split()] for ln in text[text.index("end_header") + 1:]])
    assert np.array_equal(body, s.x)
    csv = dio.positions_csv([s, s]).splitlines()
    assert csv[0] == "step,particle_id,x,y,z" and len(csv) == 2 * s.n + 1


def test_metrics_csv_columns():
    rows = [{"step": 0, "chamfer_to_goal": 1.0, "chamfer_delta": -0.5, "contact": 0.1,
             "total": -0.4}]
    assert dio.metrics_csv(rows).splitlines()[0] == \
        "step,chamfer_to_goal,chamfer_delta,contact,total"


def test_atomic_write_leaves_nothing_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.json"

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        dio.write_json(target, {"a": 1})
    assert list(tmp_path.iterdir()) == []


def test_manifest(tmp_path):
    dio.write_manifest(tmp_path, "simulate", {"seed": 3}, 3, [str(tmp_path / "x.csv")])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["verb"] == "simulate" and m["seed"] == 3 and m["outputs"] == ["x.csv"]
    assert {"dipac", "numpy", "numba", "python"} <= set(m["versions"])


# -- command line ----------------------------------------------------------------


def test_grad_check_bundled_scene(capsys):
    code, out, _ = run(capsys, "grad-check")
    assert code == 0
    m = re.search(r"max relative error ([0-9.e+-]+)", out)
    assert m and float(m.group(1)) <= 1e-3
    assert "dlogE" in out and "u[0][0]" in out


def test_grad_check_tolerance_failure_exit_code(capsys):
    code, _, _ = run(capsys, "grad-check", "--rtol", "1e-14", "--atol", "1e-16")
    assert code == 3


def test_simulate_is_byte_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "simulate", "--seed", 7, "--steps", 3, "--out", tmp_path / d)[0] == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.splitlines()[0] == b"step,chamfer_to_goal,chamfer_delta,contact,total"
    assert (tmp_path / "a" / "manifest.json").exists()


def test_simulate_from_action_file(capsys, tmp_path, scene):
    dio.save_scene(tmp_path / "scene.json", scene)
    a = RandomPolicy(scene, 0).act(scene.initial_state, scene.goal_state)
    dio.write_json(tmp_path / "acts.json", [dio.action_to_list(a)])
    code, _, _ = run(capsys, "simulate", "--scene", tmp_path / "scene.json", "--actions",
                     tmp_path / "acts.json", "--out", tmp_path / "o")
    assert code == 0
    states = dio.trajectory_from_dict(dio.read_json(tmp_path / "o" / "states.json"))
    nxt, _, _ = engine.step(scene.initial_state, a, scene.effector_template, scene.params,
                            record=False)
    assert states[1].bitwise_equal(nxt)


def test_export_two_states(capsys, tmp_path, scene):
    s0 = scene.initial_state
    dio.write_json(tmp_path / "traj.json", dio.trajectory_to_dict([s0, scene.goal_state]))
    code, _, _ = run(capsys, "export", "--states", tmp_path / "traj.json", "--format", "ply",
                     "--out", tmp_path / "ply")
    assert code == 0
    plys = sorted(p for p in os.listdir(tmp_path / "ply") if p.endswith(".ply"))
    assert len(plys) == 2
    for p in plys:
        assert f"element vertex {s0.n}" in (tmp_path / "ply" / p).read_text()


def test_gen_demos_then_calibrate(capsys, tmp_path):
    d = tmp_path / "d"
    code, _, _ = run(capsys, "gen-demos", "--n", 2, "--T", 1, "--seed", 4, "--out",
                     d / "demos.jsonl")
    assert code == 0
    code, out, _ = run(capsys, "calibrate", "--demos", d / "demos.jsonl", "--params",
                       d / "demo_params.json", "--iters", 2, "--out", d / "cal.json")
    assert code == 0
    res = json.loads((d / "cal.json").read_text())
    assert res["loss_history"][0] <= 1e-10  # demos came from these very params
    assert "manifest.json" in os.listdir(d)


def test_plan_writes_episode(capsys, tmp_path):
    out = tmp_path / "ep.json"
    code, _, _ = run(capsys, "plan", "--k", 1, "--H", 1, "--iters", 1, "--T", 1,
                     "--seed", 2, "--ply-dir", tmp_path / "ply", "--out", out)
    assert code == 0
    ep = json.loads(out.read_text())
    assert len(ep["actions"]) == 1 and len(ep["chamfer_to_goal"]) == 2
    assert len(ep["metrics"]) == 1 and len(ep["ply"]) == 2
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "manifest.json").exists()


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "plan", "--policy", "clever", "--out", "x.json")[0] == 1
    assert run(capsys, "calibrate", "--demos", "/nonexistent.jsonl", "--out", "x")[0] == 1
    assert run(capsys)[0] == 1


def test_help_per_verb(capsys):
    for verb in ("simulate", "plan", "calibrate", "gen-demos", "grad-check", "export",
                 "bench"):
        assert run(capsys, verb, "--help")[0] == 0


def test_validation_failure(capsys, tmp_path):
    bad = tmp_path / "scene.json"
    bad.write_text("{\"params\": {}}")
    assert run(capsys, "simulate", "--scene", bad, "--out", tmp_path / "o")[0] == 3


def test_simulation_failure(capsys, tmp_path, scene):
    dio.save_scene(tmp_path / "scene.json", scene)
    dio.save_params(tmp_path / "p.json", scene.params.with_(dt=0.5))
    code, _, err = run(capsys, "simulate", "--scene", tmp_path / "scene.json", "--params",
                       tmp_path / "p.json", "--steps", 1, "--out", tmp_path / "o")
    assert code == 2, err
