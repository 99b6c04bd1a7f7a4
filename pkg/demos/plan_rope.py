"""Closed-loop planning on the toy rope, against the greedy policy alone.

    python demos/plan_rope.py --seed 0 --T 10
"""
import argparse
import time

from dipac.planner import GreedyHeuristicPolicy, mpc_run, policy_episode
from dipac.tasks import TOY_ROPE_PLAN, build_toy_rope_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--T", type=int, default=10)
    ap.add_argument("--k", type=int, default=TOY_ROPE_PLAN.k)
    ap.add_argument("--iters", type=int, default=TOY_ROPE_PLAN.opt_iters)
    args = ap.parse_args()

    scene = build_toy_rope_scene(args.seed, horizon=args.T)
    base = policy_episode(scene, GreedyHeuristicPolicy(scene))
    cfg = TOY_ROPE_PLAN.with_(seed=args.seed, k=args.k, opt_iters=args.iters)

    def show(t, rec):
        print(f"  step {t + 1:2d}  chamfer {rec['chamfer_to_goal'][-1]:.3e}", flush=True)

    t0 = time.perf_counter()
    run = mpc_run(scene, GreedyHeuristicPolicy(scene), cfg, on_step=show)
    c, b = run["chamfer_to_goal"], base["chamfer_to_goal"]
    print(f"planner {c[0]:.3e} -> {c[-1]:.3e} ({c[-1] / c[0]:.3f} of initial) "
          f"in {time.perf_counter() - t0:.0f} s")
    print(f"greedy  {b[0]:.3e} -> {b[-1]:.3e} ({b[-1] / b[0]:.3f} of initial)")


if __name__ == "__main__":
    main()
