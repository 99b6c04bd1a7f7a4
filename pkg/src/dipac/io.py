"""Serialization: scene JSON, demonstration JSONL, PLY/CSV export, manifests.

Floats are written with Python's shortest round-trip repr, so a state read
back from disk is bitwise identical to the one written.  Every writer goes
through :func:`atomic_write`.
"""
import csv
import io
import json
import os
import platform
import sys
import tempfile

import numpy as np

from .core import (ACTION_ARITY, Action, Box, DynamicsParams, Effector, Material,
                   ParticleState, Scene, ValidationError)

__version__ = "0.1.0"

_KIND_BY_ARITY = {n: k for k, n in ACTION_ARITY.items()}
SCENE_COLUMNS = 7    # x y z vx vy vz mass
STATE_COLUMNS = 27   # + vol material C(9) F(9)
DEFAULT_DENSITY = 1000.0


def atomic_write(path, data):
    """Write text or bytes to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write(path, dumps(obj))


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None


# ---------------------------------------------------------------------------
# values
# ---------------------------------------------------------------------------


def _floats(a):
    return [float(v) for v in np.ravel(a)]


def action_to_list(action):
    return _floats(action.values)


def action_from_list(values, kind=None):
    vals = np.asarray(values, dtype=np.float64).ravel()
    kind = kind or _KIND_BY_ARITY.get(vals.size)
    if kind is None:
        raise ValidationError(f"no action kind has {vals.size} values")
    return Action(kind, vals)


def effector_to_dict(e):
    return {
        "boxes": [{"center": _floats(b.center), "half_extents": _floats(b.half_extents),
                   "rotation": _floats(b.rotation)} for b in e.boxes],
        "static": [bool(s) for s in e.static],
        "gripper_open": bool(e.gripper_open),
        "pivot": None if e.pivot is None else _floats(e.pivot),
    }


def effector_from_dict(d):
    if isinstance(d, list):  # bare list of boxes
        d = {"boxes": d}
    boxes = tuple(Box(b["center"], b["half_extents"],
                      np.reshape(b.get("rotation", np.eye(3).ravel()), (3, 3)))
                  for b in d.get("boxes", []))
    static = d.get("static")
    return Effector(boxes, gripper_open=bool(d.get("gripper_open", False)),
                    static=None if static is None else tuple(bool(s) for s in static),
                    pivot=d.get("pivot"))


def state_to_rows(state, full=True):
    """Per-particle rows: 7 scene columns, or all 27 columns with ``full``."""
    cols = [state.x, state.v, state.mass[:, None]]
    if full:
        cols += [state.vol[:, None], state.material[:, None].astype(np.float64),
                 state.C.reshape(-1, 9), state.F.reshape(-1, 9)]
    arr = np.hstack(cols)
    return [[float(v) for v in row] for row in arr]


def state_from_rows(rows, vol=None, material=None, time_index=0):
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] not in (SCENE_COLUMNS, STATE_COLUMNS):
        raise ValidationError(
            f"particle rows need {SCENE_COLUMNS} or {STATE_COLUMNS} columns")
    n = a.shape[0]
    x, v, m = a[:, :3], a[:, 3:6], a[:, 6]
    if a.shape[1] == STATE_COLUMNS:
        return ParticleState(x, v, a[:, 9:18].reshape(n, 3, 3), a[:, 18:27].reshape(n, 3, 3),
                             m, a[:, 7], a[:, 8].astype(np.int64), time_index)
    vol = m / DEFAULT_DENSITY if vol is None else np.broadcast_to(vol, (n,))
    mat = Material.ELASTIC if material is None else np.asarray(material, dtype=np.int64)
    return ParticleState.at_rest(x, m, vol, mat, v=v).replace(time_index=time_index)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def scene_to_dict(scene):
    s0 = scene.initial_state
    d = {
        "params": scene.params.to_dict(),
        "initial_particles": state_to_rows(s0, full=False),
        "goal_particles": state_to_rows(scene.goal_state, full=False),
        "particle_volumes": _floats(s0.vol),
        "particle_materials": [int(m) for m in s0.material],
        "effector": effector_to_dict(scene.effector_template),
        "task": scene.task_tag,
        "action_kind": scene.action_kind,
        "horizons": {"task": scene.task_horizon, "planning": scene.planning_horizon},
    }
    if scene.bounds is not None:
        d["bounds"] = {"lo": _floats(scene.bounds[0]), "hi": _floats(scene.bounds[1])}
    return d


def scene_from_dict(d):
    for key in ("params", "initial_particles", "goal_particles", "effector", "task",
                "horizons"):
        if key not in d:
            raise ValidationError(f"scene JSON lacks {key!r}")
    params = DynamicsParams.from_dict(d["params"])
    vol = d.get("particle_volumes")
    mat = d.get("particle_materials")
    s0 = state_from_rows(d["initial_particles"], vol, mat)
    g = state_from_rows(d["goal_particles"], None if vol is None or
                        len(vol) != len(d["goal_particles"]) else vol,
                        None if mat is None or len(mat) != len(d["goal_particles"]) else mat)
    h = d["horizons"]
    b = d.get("bounds")
    return Scene(s0, g, params, effector_from_dict(d["effector"]), d["task"],
                 int(h["task"]), int(h["planning"]), d.get("action_kind"),
                 None if b is None else (b["lo"], b["hi"]))


def save_scene(path, scene):
    write_json(path, scene_to_dict(scene))


def load_scene(path):
    return scene_from_dict(read_json(path))


def save_params(path, params):
    write_json(path, params.to_dict())


def load_params(path):
    d = read_json(path)
    return DynamicsParams.from_dict(d.get("params", d))


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------


def demos_to_jsonl(demos):
    lines = []
    for i, demo in enumerate(demos):
        for t in range(demo.transitions):
            rec = {"demo_id": i, "t": t, "state": state_to_rows(demo.states[t]),
                   "action": action_to_list(demo.actions[t]),
                   "effector": effector_to_dict(demo.effectors[t]),
                   "next_state": state_to_rows(demo.states[t + 1])}
            lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_demos(path, demos):
    atomic_write(path, demos_to_jsonl(demos))


def read_demos(path):
    """Demonstrations from a JSONL file, grouped by demo_id and ordered by t."""
    from .tasks import Demonstration

    groups = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{ln}: invalid JSON ({e})") from None
            groups.setdefault(r["demo_id"], []).append(r)
    demos = []
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r["t"])
        if [r["t"] for r in recs] != list(range(len(recs))):
            raise ValidationError(f"demo {key}: transitions are not contiguous from t=0")
        states = [state_from_rows(recs[0]["state"], time_index=0)]
        actions, effs = [], []
        for r in recs:
            actions.append(action_from_list(r["action"]))
            effs.append(effector_from_dict(r["effector"]))
            states.append(state_from_rows(r["next_state"], time_index=r["t"] + 1))
        demos.append(Demonstration(states, actions, effs))
    if not demos:
        raise ValidationError(f"{path}: no transitions")
    return demos


# ---------------------------------------------------------------------------
# export and reports
# ---------------------------------------------------------------------------


def ply_text(state):
    x = state.x if isinstance(state, ParticleState) else np.asarray(state, dtype=np.float64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(x)}", "property double x",
            "property double y", "property double z", "end_header"]
    body = [f"{float(a)!r} {float(b)!r} {float(c)!r}" for a, b, c in x]
    return "\n".join(head + body) + "\n"


def export_ply(path, state):
    atomic_write(path, ply_text(state))


def positions_csv(states):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "particle_id", "x", "y", "z"])
    for t, s in enumerate(states):
        x = s.x if isinstance(s, ParticleState) else np.asarray(s)
        for i, p in enumerate(x):
            w.writerow([t, i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])
    return buf.getvalue()


def export_csv(path, states):
    atomic_write(path, positions_csv(states))


METRIC_COLUMNS = ("step", "chamfer_to_goal", "chamfer_delta", "contact", "total")


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def write_metrics(path, rows):
    atomic_write(path, metrics_csv(rows))


def trajectory_to_dict(states):
    return {"states": [state_to_rows(s) for s in states]}


def trajectory_from_dict(d):
    rows = d["states"] if isinstance(d, dict) else d
    return [state_from_rows(r, time_index=t) for t, r in enumerate(rows)]


def versions():
    import numba
    import scipy

    return {"dipac": __version__, "python": sys.version.split()[0], "numpy": np.__version__,
            "numba": numba.__version__, "scipy": scipy.__version__,
            "platform": platform.platform()}


def write_manifest(directory, verb, config, seed=None, outputs=()):
    """manifest.json with the run's verb, configuration, seed and versions."""
    m = {"verb": verb, "config": config, "seed": seed, "versions": versions(),
         "outputs": sorted(os.path.basename(o) for o in outputs)}
    path = os.path.join(directory, "manifest.json")
    write_json(path, m)
    return path
