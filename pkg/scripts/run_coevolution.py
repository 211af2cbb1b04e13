"""Run the curriculum conditions on shared scene pools and write run directories plus a report.

Usage: python3 scripts/run_coevolution.py [--out DIR] [--seed N] [--epochs N] [--conditions C ...]

Every condition sees the same training pool and held-out episodes for a
given seed. Each run directory can be reloaded with ``navworld report``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from navworld.coevolve import CONDITIONS, RunConfig, report, run_conditions


def main(argv: list[str]) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/coevolution")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--heldout", type=int, default=100, help="held-out episode count")
    p.add_argument("--conditions", nargs="+", default=list(CONDITIONS))
    args = p.parse_args(argv)

    base = RunConfig(seed=args.seed, epochs=args.epochs, heldout_episodes=args.heldout)
    out = Path(args.out)

    def progress(condition, r):
        ev = f" held-out SR {r.eval['SR']:.2f}" if r.eval else ""
        print(f"{condition:12s} epoch {r.epoch:2d} level {r.level} SR {r.sr:.2f} rules {r.rules}{ev}", flush=True)

    runs = run_conditions(base, args.conditions, progress)
    dirs = [res.save(out / name) for name, res in runs.items()]
    summary = report(dirs, out / "report")
    for row in summary["conditions"]:
        final = row["final"] or {}
        print(f"{row['condition']:12s} final held-out SR {final.get('SR', float('nan')):.3f} "
              f"SPL {final.get('SPL', float('nan')):.3f} level transitions at {row['level_transitions']}")
    print(f"report -> {out / 'report'}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
