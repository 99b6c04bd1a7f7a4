"""Recover Young's modulus and friction of the toy rope from random pushes.

Demonstrations are one-step rollouts under the true parameters.  The fit
starts from twice the true values and runs log-space gradient descent.

    python demos/calibrate_rope.py --demos 10 --iters 50
"""
import argparse
import time

from dipac.calibration import calibrate, prediction_loss
from dipac.planner import RandomPolicy
from dipac.tasks import build_toy_rope_scene, generate_demos


def rope_demos(seeds, demo_seed):
    demos = []
    for i, s in enumerate(seeds):
        scene = build_toy_rope_scene(s, horizon=1, planning_horizon=1)
        demos += generate_demos(scene, RandomPolicy, n=1, seed=demo_seed + i)
    return demos, scene.params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--demos", type=int, default=10)
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--lr", type=float, default=0.05)
    args = ap.parse_args()

    demos, truth = rope_demos(range(100, 100 + args.demos), 1000)
    start = truth.with_(E=2 * truth.E, mu=2 * truth.mu)
    t0 = time.perf_counter()
    res = calibrate(demos, start, lr=args.lr, iters=args.iters)
    print(f"fitted in {time.perf_counter() - t0:.1f} s")
    for it in range(0, len(res.loss_history), max(1, len(res.loss_history) // 10)):
        E, mu = res.param_history[it]
        print(f"  iter {it:3d}  loss {res.loss_history[it]:.3e}  E {E:8.1f}  mu {mu:.3f}")
    print(f"truth E {truth.E:.1f} mu {truth.mu:.3f}; "
          f"fit E {res.params.E:.1f} mu {res.params.mu:.3f}")

    held, _ = rope_demos(range(200, 205), 5000)
    before, after = prediction_loss(held, start), prediction_loss(held, res.params)
    print(f"held-out one-step Chamfer {before:.3e} -> {after:.3e} "
          f"({100 * (1 - after / before):.1f}% better)")


if __name__ == "__main__":
    main()
