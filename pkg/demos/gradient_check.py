"""Compare adjoint gradients with central finite differences on a small scene.

    python demos/gradient_check.py --seed 3 --particles 8 --actions 3
"""
import argparse

from dipac.autodiff import TerminalChamfer, TrajectoryCost, gradient_check
from dipac.tasks import blob_case


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--particles", type=int, default=5)
    ap.add_argument("--actions", type=int, default=2)
    ap.add_argument("--substeps", type=int, default=20)
    ap.add_argument("--h", type=float, default=1e-6)
    args = ap.parse_args()

    state, actions, params, eff, goal = blob_case(args.seed, args.particles, args.actions,
                                                  args.substeps)
    for loss in (TerminalChamfer(goal), TrajectoryCost(goal, 1.0)):
        r = gradient_check(state, actions, params, loss, eff, h=args.h)
        print(f"{type(loss).__name__:16s} {len(r.rows):3d} coordinates  "
              f"max relative error {r.max_rel:.2e}  {'ok' if r.passed else 'FAILED'}")
        for name, adj, fd, *_ in r.rows[:6]:
            print(f"    {name:>22s}  adjoint {adj:+.6e}  fd {fd:+.6e}")


if __name__ == "__main__":
    main()
