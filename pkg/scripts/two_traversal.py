"""Loop detection on the two-pass synthetic world, with and without a processing budget.

    python3 scripts/two_traversal.py [--seed 0] [--budget-fraction 0.5] [--out results/two_traversal]
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from loopmem import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget-fraction", type=float, default=None,
                    help="t_time as a fraction of the unbounded cost at the end of the first pass")
    ap.add_argument("--out", type=Path, default=Path("results/two_traversal"))
    args = ap.parse_args()

    swept = bench.two_traversal(seed=args.seed, budget_fraction=args.budget_fraction)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "sweep.txt", "w") as fh:
        fh.write("t_loop precision recall detections approximate\n")
        for p in swept.points:
            fh.write(f"{p.t_loop:.2f} {p.precision:.4f} {p.recall:.4f} {p.detections} {int(p.approximate)}\n")
    summary = {"seed": args.seed, "budget_fraction": args.budget_fraction, "t_time": swept.t_time,
               "ltm_fraction_at_revisit": swept.ltm_fraction_at_revisit,
               "best_swept": asdict(swept.best) if swept.best else None}
    if swept.best:
        run = bench.two_traversal(seed=args.seed, t_time=swept.t_time, t_loop=swept.best.t_loop)
        summary["rerun_at_best"] = asdict(run.actual)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
