"""Acceptance criteria, one test each, at the stated tolerances.

A summary line per criterion is printed at the end of the pytest run.  The
planner criteria (6 and 7) share one set of closed-loop episodes and use the
model calibrated in criterion 5, so the whole module takes the better part of
an hour on one core.
"""
import json
import math
import statistics
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, blob
from dipac import cli
from dipac import io as dio
from dipac.autodiff import TerminalChamfer, TrajectoryCost, gradient_check
from dipac.calibration import calibrate, prediction_loss
from dipac.chamfer import chamfer
from dipac.core import Action, Box, DynamicsParams, Effector, ParticleState
from dipac.cost import trajectory_cost
from dipac.kinematics import EffectorPath
from dipac.mpm import engine
from dipac.planner import GreedyHeuristicPolicy, RandomPolicy, mpc_run, policy_episode
from dipac.tasks import TOY_ROPE_PLAN, blob_case, build_toy_rope_scene, generate_demos

pytestmark = pytest.mark.slow
SEEDS = range(10)


def report(n, title, ok, detail):
    ACCEPTANCE[n] = (bool(ok), title, detail)
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------


def test_1_conservation():
    t0 = time.perf_counter()
    p = DynamicsParams()
    g = engine.Grid(p.grid_dims, p.dx)
    rng = np.random.default_rng(2024)
    worst_m = worst_mv = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 2001))
        s = ParticleState(rng.uniform(0.1, 0.9, (n, 3)), rng.normal(size=(n, 3)),
                          rng.normal(size=(n, 3, 3)),
                          np.eye(3) + 0.1 * rng.normal(size=(n, 3, 3)),
                          rng.uniform(0.1, 2.0, n) * 1e-3, rng.uniform(0.5, 2.0, n) * 1e-6,
                          rng.integers(0, 3, n))
        g.reset()
        engine.p2g(s, g, p)
        m = math.fsum(s.mass)
        worst_m = max(worst_m, abs(math.fsum(g.mass) - m) / m)
        mv = (s.mass[:, None] * s.v).sum(axis=0)
        gmv = np.array([math.fsum(g.momentum[:, k]) for k in range(3)])
        worst_mv = max(worst_mv, np.abs(gmv - mv).max() / np.abs(mv).max())
    g.reset()
    worst_pu = worst_fm = 0.0
    for xp in rng.uniform(0.05, 0.95, (1000, 3)):
        idx, w = engine.bspline_weights(xp, p)
        worst_pu = max(worst_pu, abs(w.sum() - 1.0))
        worst_fm = max(worst_fm, np.abs((w[:, None] * (idx * p.dx - xp)).sum(axis=0)).max())
    dt = time.perf_counter() - t0
    # "exact" mass: equal up to floating-point rounding of the stencil weights
    eps = np.finfo(float).eps
    ok = worst_m <= 8 * eps and worst_mv <= 1e-12 and worst_pu <= 1e-12 \
        and worst_fm <= 1e-12 and dt < 60
    report(1, "conservation", ok,
           f"mass rel {worst_m:.1e} (<= 8 ulp), momentum rel {worst_mv:.1e}, "
           f"unity {worst_pu:.1e}, first moment {worst_fm:.1e}, {dt:.1f} s")


# -- 2 ---------------------------------------------------------------------------


def test_2_gradient_fidelity():
    t0 = time.perf_counter()
    worst = 0.0
    failed = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(2, 11))
        na = int(rng.integers(1, 4))
        S = int(rng.integers(20, 41))  # at most 3 * 40 = 120 substeps
        state, actions, p, eff, goal = blob_case(seed, n, na, S)
        for loss in (TerminalChamfer(goal), TrajectoryCost(goal, 1.0)):
            r = gradient_check(state, actions, p, loss, eff, h=1e-6)
            worst = max(worst, r.max_rel)
            if not r.passed:
                failed.append((seed, type(loss).__name__))
    dt = time.perf_counter() - t0
    report(2, "gradient fidelity", not failed and dt < 600,
           f"20 scenes x 2 losses, max rel error (above 1e-7 abs) {worst:.1e}, "
           f"failures {failed}, {dt:.1f} s")


# -- 3 ---------------------------------------------------------------------------


def test_3_rest_and_galilean():
    rest = gal = 0.0
    for seed in range(10):
        p = DynamicsParams(gravity=(0.0, 0.0, 0.0))
        s = blob(60, seed)
        out, _ = engine.advance(s, EffectorPath.empty(p.substeps), p, record=False)
        rest = max(rest, max(np.abs(getattr(out, f) - getattr(s, f)).max()
                             for f in ("x", "v", "C", "F")))
        rng = np.random.default_rng(seed)
        q = DynamicsParams(wall_margin=0)
        u = np.append(rng.uniform(-0.5, 0.5, 2), 0.0)
        T = q.substeps * q.dt
        eff = Effector((Box([0.3, 0.3, 0.3], [0.02, 0.02, 0.02]),))
        base, _, _ = engine.step(s, Action.sweep([0.3, 0.3], [0.32, 0.3]), eff, q,
                                 record=False)
        moved, _, _ = engine.step(s.replace(v=s.v + u),
                                  Action.sweep([0.3, 0.3], [0.32, 0.3] + u[:2] * T), eff, q,
                                  record=False)
        gal = max(gal, np.abs(moved.x - base.x - u * T).max())
    report(3, "rest fixed point and Galilean shift", rest <= 1e-12 and gal <= 1e-9,
           f"rest deviation {rest:.1e} (<= 1e-12), shift deviation {gal:.1e} (<= 1e-9)")


# -- 4 ---------------------------------------------------------------------------


def test_4_telescoping():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        state, actions, p, eff, goal = blob_case(seed, int(rng.integers(2, 11)),
                                                 int(rng.integers(1, 4)), 20)
        states, effs, _ = engine.rollout(state, actions, p, eff, record=False)
        diff = chamfer(states[-1], goal) - chamfer(states[0], goal)
        c1 = trajectory_cost(states, effs[:-1], goal, contact_weight=0.0)
        c2 = TrajectoryCost(goal, 0.0).evaluate(states, effs, actions, p)[0]
        worst = max(worst, abs(c1 - diff), abs(c2 - diff))
    report(4, "telescoping", worst <= 1e-9, f"max deviation {worst:.1e} over 50 rollouts")


# -- 5 ---------------------------------------------------------------------------


def rope_demos(seeds, demo_seed):
    demos = []
    for i, s in enumerate(seeds):
        sc = build_toy_rope_scene(s, horizon=1, planning_horizon=1)
        demos += generate_demos(sc, RandomPolicy, n=1, seed=demo_seed + i)
    return demos, sc.params


@pytest.fixture(scope="module")
def calibration_run():
    demos, truth = rope_demos(range(100, 110), 1000)
    p0 = truth.with_(E=2 * truth.E, mu=2 * truth.mu)
    t0 = time.perf_counter()
    res = calibrate(demos, p0, lr=0.05, iters=100)
    return truth, p0, res, time.perf_counter() - t0


def test_5_calibration(calibration_run):
    truth, p0, res, dt = calibration_run
    h = res.loss_history
    held, _ = rope_demos(range(200, 205), 5000)
    before = prediction_loss(held, p0)
    after = prediction_loss(held, res.params)
    gain = 1.0 - after / before
    eE = abs(res.params.E / truth.E - 1)
    emu = abs(res.params.mu / truth.mu - 1)
    ok = res.final_loss <= 0.2 * h[0] and gain >= 0.6 and dt < 1800
    report(5, "calibration", ok,
           f"loss {h[0]:.2e} -> {res.final_loss:.2e} (ratio {res.final_loss / h[0]:.3f}), "
           f"held-out gain {100 * gain:.1f}%, {dt:.0f} s; advisory recovery "
           f"E {100 * eE:.1f}% mu {100 * emu:.1f}% "
           f"({'within' if max(eE, emu) <= 0.25 else 'outside'} 25%)")


# -- 6 and 7 ---------------------------------------------------------------------


def terminal_ratio(rec):
    c = rec["chamfer_to_goal"]
    return c[-1] / c[0] if rec["failed"] is None else math.inf


@pytest.fixture(scope="module")
def episodes(calibration_run):
    _, p0, res, _ = calibration_run
    model = res.params
    arms = {
        "full": lambda sc, s: mpc_run(sc, GreedyHeuristicPolicy(sc),
                                      TOY_ROPE_PLAN.with_(seed=s), model),
        "policy only": lambda sc, s: policy_episode(sc, GreedyHeuristicPolicy(sc)),
        "no calibration": lambda sc, s: mpc_run(sc, GreedyHeuristicPolicy(sc),
                                                TOY_ROPE_PLAN.with_(seed=s), p0),
        "no optimisation": lambda sc, s: mpc_run(sc, GreedyHeuristicPolicy(sc),
                                                 TOY_ROPE_PLAN.with_(seed=s, opt_iters=0),
                                                 model),
        "no tree": lambda sc, s: mpc_run(sc, GreedyHeuristicPolicy(sc),
                                         TOY_ROPE_PLAN.with_(seed=s, k=0), model),
        "no initial policy": lambda sc, s: mpc_run(sc, RandomPolicy(sc, s),
                                                   TOY_ROPE_PLAN.with_(seed=s), model),
    }
    out = {}
    for name, fn in arms.items():
        recs = []
        for s in SEEDS:
            sc = build_toy_rope_scene(s)
            recs.append(fn(sc, s))
        out[name] = recs
    return out


def test_6_planner_efficacy(episodes):
    full = episodes["full"]
    ratios = [terminal_ratio(r) for r in full]
    good = sum(r <= 0.5 for r in ratios)
    med_full = statistics.median(r["chamfer_to_goal"][-1] for r in full)
    med_pol = statistics.median(r["chamfer_to_goal"][-1] for r in episodes["policy only"])
    ok = good >= 8 and med_full < med_pol
    report(6, "planner efficacy", ok,
           f"{good}/10 seeds reach <= 50% of initial Chamfer (ratios "
           f"{', '.join(f'{r:.3f}' for r in ratios)}); median terminal Chamfer "
           f"{med_full:.3e} vs pure policy {med_pol:.3e}")


def test_7_ablation_ordering(episodes):
    med = {k: statistics.median(r["chamfer_to_goal"][-1] if r["failed"] is None else math.inf
                                for r in v) for k, v in episodes.items()}
    abl = ("no calibration", "no optimisation", "no tree", "no initial policy")
    ok = all(med["full"] <= med[a] for a in abl)
    report(7, "ablation ordering", ok,
           "median terminal Chamfer " + ", ".join(f"{k} {med[k]:.3e}" for k in
                                                  ("full",) + abl))


# -- 8 ---------------------------------------------------------------------------


def test_8_bench(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--reps", "20", "--opt-reps", "1", "--out", str(out)]) == 0
    capsys.readouterr()
    r = json.loads(out.read_text())
    f, b = r["step_forward_s"], r["step_backward_s"]
    report(8, "performance", f <= 0.1 and b <= 0.4,
           f"step forward {1e3 * f:.1f} ms (<= 100), step backward {1e3 * b:.1f} ms (<= 400), "
           f"traj optimisation {r['traj_optimization_s']:.2f} s, medians of 20")


# -- 9 ---------------------------------------------------------------------------


def test_9_determinism(tmp_path, monkeypatch, capsys):
    runs = {
        "simulate": (["simulate", "--seed", "7", "--steps", "3", "--out", "{d}"],
                     "metrics.csv"),
        "gen-demos": (["gen-demos", "--n", "3", "--T", "1", "--seed", "7", "--out",
                       "{d}/demos.jsonl"], "demos.jsonl"),
        "plan": (["plan", "--k", "3", "--H", "2", "--iters", "1", "--T", "2", "--seed", "7",
                  "--out", "{d}/ep.json"], "metrics.csv"),
        "export": None,
        "calibrate": None,
    }
    outputs = {}
    for threads in ("1", "4"):
        monkeypatch.setenv("DIPAC_THREADS", threads)
        for rep in ("a", "b"):
            for verb, spec in runs.items():
                d = tmp_path / threads / rep / verb
                if verb == "export":
                    src = tmp_path / threads / rep / "simulate" / "states.json"
                    argv, name = ["export", "--states", str(src), "--out", "{d}"], \
                        "positions.csv"
                elif verb == "calibrate":
                    src = tmp_path / threads / rep / "gen-demos"
                    argv = ["calibrate", "--demos", str(src / "demos.jsonl"), "--params",
                            str(src / "demo_params.json"), "--init-E", "8000", "--iters",
                            "2", "--out", "{d}/cal.json"]
                    name = "cal.json"
                else:
                    argv, name = spec
                assert cli.main([a.replace("{d}", str(d)) for a in argv]) == 0, verb
                outputs.setdefault(verb, []).append((d / name).read_bytes())
    capsys.readouterr()
    same = {v: len(set(o)) == 1 for v, o in outputs.items()}
    report(9, "determinism", all(same.values()),
           "byte-identical across 2 runs x DIPAC_THREADS {1, 4}: "
           + ", ".join(f"{v} {'yes' if s else 'NO'}" for v, s in same.items()))
