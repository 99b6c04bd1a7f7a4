"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 simulation failure, 3 validation
failure (bad input files, or a grad-check over tolerance).
"""
import argparse
import logging
import os
import statistics
import sys
import time

import numpy as np

from . import io as dio
from .core import DipacError, DynamicsParams, Effector, SimulationError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_SIM, EXIT_VALIDATION = 0, 1, 2, 3

log = logging.getLogger("dipac")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _scene_from_args(args):
    from .tasks import build_scene

    if getattr(args, "scene", None):
        _exists(args.scene)
        return dio.load_scene(args.scene)
    return build_scene(args.builder, seed=args.scene_seed)


def _exists(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")


def _params(args, scene=None):
    if getattr(args, "params", None):
        _exists(args.params)
        return dio.load_params(args.params)
    return scene.params if scene is not None else DynamicsParams()


def _policy(name, scene, seed):
    from .planner import GreedyHeuristicPolicy, RandomPolicy

    return GreedyHeuristicPolicy(scene) if name == "greedy" else RandomPolicy(scene, seed)


def _outdir(path, is_file=False):
    d = os.path.dirname(os.path.abspath(path)) if is_file else os.path.abspath(path)
    os.makedirs(d, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    from .chamfer import chamfer
    from .cost import step_cost
    from .mpm import engine
    from .planner import RandomPolicy, contact_point

    scene = _scene_from_args(args)
    params = _params(args, scene)
    if args.actions:
        _exists(args.actions)
        d = dio.read_json(args.actions)
        actions = [dio.action_from_list(a, scene.action_kind)
                   for a in (d["actions"] if isinstance(d, dict) else d)]
    else:
        pol = RandomPolicy(scene, args.seed)
        actions = None
    T = len(actions) if actions else (args.steps or scene.task_horizon)
    s, e = scene.initial_state, scene.effector_template
    states, rows, used = [s], [], []
    for t in range(T):
        a = actions[t] if actions else pol.act(s, scene.goal_state)
        nxt, e_next, _ = engine.step(s, a, e, params, record=False, step_index=t)
        m = contact_point(a, e, params)
        bd = step_cost(s, nxt, scene.goal_state, m if m is not None else Effector(()),
                       args.contact_weight, params.dx)
        rows.append({"step": t, "chamfer_to_goal": chamfer(nxt, scene.goal_state),
                     "chamfer_delta": bd.chamfer_delta, "contact": bd.contact,
                     "total": bd.total})
        used.append(dio.action_to_list(a))
        s, e = nxt, e_next
        states.append(s)
    out = _outdir(args.out)
    files = [os.path.join(out, "states.json"), os.path.join(out, "metrics.csv"),
             os.path.join(out, "actions.json")]
    dio.write_json(files[0], dio.trajectory_to_dict(states))
    dio.write_metrics(files[1], rows)
    dio.write_json(files[2], {"kind": scene.action_kind, "actions": used})
    dio.write_manifest(out, "simulate", _config(args), args.seed, files)
    print(f"simulated {T} actions; final chamfer {rows[-1]['chamfer_to_goal']:.6e}"
          if rows else "no actions")
    return EXIT_OK


def cmd_plan(args):
    from .planner import mpc_run
    from .tasks import plan_config_for

    scene = _scene_from_args(args)
    if args.T:
        scene = scene.replace(task_horizon=args.T,
                              planning_horizon=min(scene.planning_horizon, args.T))
    model = _params(args, scene)
    base = plan_config_for(scene, toy=args.builder == "toy_rope" and not args.scene)
    over = {k: v for k, v in (("k", args.k), ("H", args.H), ("opt_iters", args.iters),
                              ("eta", args.eta), ("contact_weight", args.contact_weight))
            if v is not None}
    cfg = base.with_(seed=args.seed, **over)
    rec = mpc_run(scene, _policy(args.policy, scene, args.seed), cfg, model)
    out = os.path.abspath(args.out)
    d = _outdir(out, is_file=True)
    files = [out]
    episode = {
        "actions": [dio.action_to_list(a) for a in rec["actions"]],
        "action_kind": scene.action_kind,
        "chamfer_to_goal": rec["chamfer_to_goal"],
        "metrics": rec["metrics"],
        "chosen": [dg["chosen"] for dg in rec["diagnostics"]],
        "failed": rec["failed"],
        "config": {"k": cfg.k, "H": cfg.H, "opt_iters": cfg.opt_iters, "eta": cfg.eta,
                   "contact_weight": cfg.contact_weight, "seed": cfg.seed},
    }
    if args.ply_dir:
        for t, s in enumerate(rec["states"]):
            p = os.path.join(args.ply_dir, f"state_{t:03d}.ply")
            dio.export_ply(p, s)
        episode["ply"] = [f"state_{t:03d}.ply" for t in range(len(rec["states"]))]
    dio.write_json(out, episode)
    mpath = os.path.join(d, "metrics.csv")
    dio.write_metrics(mpath, rec["metrics"])
    files.append(mpath)
    dio.write_manifest(d, "plan", _config(args), args.seed, files)
    c = rec["chamfer_to_goal"]
    print(f"chamfer {c[0]:.6e} -> {c[-1]:.6e} over {len(rec['actions'])} actions")
    if rec["failed"]:
        print(f"episode ended early: {rec['failed']['error']}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


def cmd_calibrate(args):
    from .calibration import CalibrationDiverged, calibrate

    _exists(args.demos)
    demos = dio.read_demos(args.demos)
    p0 = _params(args)
    if args.init_E:
        p0 = p0.with_(E=args.init_E)
    if args.init_mu:
        p0 = p0.with_(mu=args.init_mu)
    try:
        res = calibrate(demos, p0, lr=args.lr, iters=args.iters)
        code = EXIT_OK
    except CalibrationDiverged as e:
        res = e.result
        code = EXIT_SIM
    out = os.path.abspath(args.out)
    d = _outdir(out, is_file=True)
    dio.write_json(out, {"params": res.params.to_dict(), "loss_history": res.loss_history,
                         "iterations": res.iterations, "diverged": res.diverged})
    dio.write_manifest(d, "calibrate", _config(args), None, [out])
    h = res.loss_history
    print(f"loss {h[0]:.6e} -> {min(h):.6e}; E = {res.params.E:.6g}, mu = {res.params.mu:.6g}")
    return code


def cmd_gen_demos(args):
    from .planner import GreedyHeuristicPolicy, RandomPolicy
    from .tasks import generate_demos

    scene = _scene_from_args(args)
    params = _params(args, scene)
    policy = GreedyHeuristicPolicy(scene) if args.policy == "greedy" else RandomPolicy
    demos = generate_demos(scene, policy, params, n=args.n, seed=args.seed, horizon=args.T)
    out = os.path.abspath(args.out)
    d = _outdir(out, is_file=True)
    dio.write_demos(out, demos)
    ppath = os.path.join(d, "demo_params.json")
    dio.save_params(ppath, params)
    dio.write_manifest(d, "gen-demos", _config(args), args.seed, [out, ppath])
    print(f"wrote {len(demos)} demos, {sum(x.transitions for x in demos)} transitions")
    return EXIT_OK


def cmd_grad_check(args):
    from .autodiff import TerminalChamfer, TrajectoryCost, gradient_check
    from .tasks import blob_case

    state, actions, params, eff, goal = blob_case(args.seed, args.particles, args.actions)
    loss = TerminalChamfer(goal) if args.loss == "terminal" else TrajectoryCost(goal, 1.0)
    r = gradient_check(state, actions, params, loss, eff, h=args.h, rtol=args.rtol,
                       atol=args.atol)
    print(f"{'coordinate':>12} {'adjoint':>14} {'finite diff':>14} {'abs err':>9} {'rel err':>9}")
    for name, a, f, err, rel, ok in r.rows:
        print(f"{name:>12} {a:14.6e} {f:14.6e} {err:9.2e} {rel:9.2e}{'' if ok else '  FAIL'}")
    n_bad = sum(not row[5] for row in r.rows)
    print(f"{len(r.rows)} coordinates, {n_bad} outside tolerance; "
          f"max relative error {r.max_rel:.3e}, max absolute error {r.max_abs:.3e}")
    return EXIT_OK if r.passed else EXIT_VALIDATION


def cmd_export(args):
    _exists(args.states)
    d = dio.read_json(args.states)
    if isinstance(d, dict) and "initial_particles" in d:
        states = [dio.state_from_rows(d["initial_particles"]),
                  dio.state_from_rows(d["goal_particles"])]
    else:
        states = dio.trajectory_from_dict(d)
    out = _outdir(args.out)
    files = []
    if args.format in ("ply", "both"):
        for t, s in enumerate(states):
            p = os.path.join(out, f"state_{t:03d}.ply")
            dio.export_ply(p, s)
            files.append(p)
    if args.format in ("csv", "both"):
        p = os.path.join(out, "positions.csv")
        dio.export_csv(p, states)
        files.append(p)
    dio.write_manifest(out, "export", _config(args), None, files)
    print(f"exported {len(states)} states to {out}")
    return EXIT_OK


def cmd_bench(args):
    from .autodiff import TrajectoryCost, backward, grad_rollout
    from .mpm import engine
    from .planner import GreedyHeuristicPolicy, build_tree, optimize_candidate
    from .tasks import TASK_SPECS, build_rope_scene

    scene = build_rope_scene(args.seed)
    if args.particles != scene.initial_state.n:
        raise UsageError("bench uses the 2000-particle rope scene; --particles must be 2000")
    p = scene.params
    pol = GreedyHeuristicPolicy(scene)
    s0, e0, goal = scene.initial_state, scene.effector_template, scene.goal_state
    a = pol.act(s0, goal)
    loss = TrajectoryCost(goal, 0.0)
    grad_rollout(s0, [a], p, loss, e0)  # compile and warm caches
    fwd, bwd = [], []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        engine.step(s0, a, e0, p, record=False)
        fwd.append(time.perf_counter() - t0)
        states, effs, traces = engine.rollout(s0, [a], p, e0, record=True)
        _, xb, ab = loss.evaluate(states, effs, [a], p, grad=True)
        t0 = time.perf_counter()
        backward(states, effs, traces, [a], p, xb, ab)
        bwd.append(time.perf_counter() - t0)
    cfg = TASK_SPECS["rope"].plan.with_(k=0, contact_weight=0.0)
    opt = []
    for _ in range(args.opt_reps):
        c = build_tree(s0, goal, pol, cfg, p, scene)[0]
        t0 = time.perf_counter()
        optimize_candidate(c, goal, cfg, p, scene)
        opt.append(time.perf_counter() - t0)
    res = {"particles": s0.n, "grid": list(p.grid_dims), "substeps": p.substeps,
           "step_forward_s": statistics.median(fwd), "step_backward_s": statistics.median(bwd),
           "traj_optimization_s": statistics.median(opt) if opt else None,
           "reps": args.reps, "opt_reps": args.opt_reps,
           "opt_config": {"H": cfg.H, "opt_iters": cfg.opt_iters}}
    print(f"{'phase':<22}{'median (s)':>12}")
    print(f"{'Step Forward':<22}{res['step_forward_s']:>12.4f}")
    print(f"{'Step Backward':<22}{res['step_backward_s']:>12.4f}")
    if opt:
        print(f"{'Traj Optimization':<22}{res['traj_optimization_s']:>12.4f}")
    print(f"({s0.n} particles, {p.grid_dims[0]}^3 grid, {p.substeps} substeps per step; "
          f"medians of {args.reps} repetitions)")
    if args.out:
        out = os.path.abspath(args.out)
        dio.write_json(out, res)
        dio.write_manifest(_outdir(out, is_file=True), "bench", _config(args), args.seed,
                           [out])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _scene_opts(p):
    p.add_argument("--scene", help="scene JSON file")
    p.add_argument("--builder", default="toy_rope",
                   help="scene builder when --scene is not given (default: toy_rope)")
    p.add_argument("--scene-seed", type=int, default=0, help="seed for --builder")


def build_parser():
    ap = _Parser(prog="dipac", description="Differentiable MPM simulation and planning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="roll out an action file (or random actions)")
    _scene_opts(p)
    p.add_argument("--params", help="dynamics parameters JSON (default: the scene's)")
    p.add_argument("--actions", help="JSON list of action vectors")
    p.add_argument("--steps", type=int, help="random actions to apply without --actions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contact-weight", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="run the trajectory-tree MPC loop")
    _scene_opts(p)
    p.add_argument("--params", help="model parameters used for planning")
    p.add_argument("--policy", choices=("greedy", "random"), default="greedy")
    p.add_argument("--k", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--iters", type=int, help="gradient rounds per candidate")
    p.add_argument("--eta", type=float)
    p.add_argument("--contact-weight", type=float)
    p.add_argument("--T", type=int, help="task horizon override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ply-dir", help="also dump every state as PLY here")
    p.add_argument("--out", required=True, help="episode JSON path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("calibrate", help="fit E and mu to demonstrations")
    p.add_argument("--demos", required=True, help="demonstration JSONL")
    p.add_argument("--params", help="initial parameters JSON (grid, dt, E, mu, ...)")
    p.add_argument("--init-E", type=float)
    p.add_argument("--init-mu", type=float)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--out", required=True, help="calibrated parameters JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-demos", help="write synthetic demonstrations (JSONL)")
    _scene_opts(p)
    p.add_argument("--params", help="ground-truth parameters (default: the scene's)")
    p.add_argument("--policy", choices=("greedy", "random"), default="random")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--T", type=int, default=3, help="transitions per demo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("grad-check", help="adjoint vs central finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--particles", type=int, default=5)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--loss", choices=("terminal", "trajectory"), default="terminal")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--atol", type=float, default=1e-7)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export", help="state/trajectory JSON to PLY and CSV")
    p.add_argument("--states", required=True, help="trajectory JSON (or a scene JSON)")
    p.add_argument("--format", choices=("ply", "csv", "both"), default="both")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="time forward, backward and trajectory optimisation")
    p.add_argument("--particles", type=int, default=2000)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--opt-reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the results as JSON")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dipac {args.verb}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationError as e:
        print(f"dipac {args.verb}: simulation failed: {e}", file=sys.stderr)
        return EXIT_SIM
    except (ValidationError, KeyError, ValueError) as e:
        print(f"dipac {args.verb}: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DipacError as e:
        print(f"dipac {args.verb}: {e}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
