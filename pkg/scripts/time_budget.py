"""Wall-clock budget run on the 3000-frame world; writes the pTime, WM and vocabulary series.

    python3 scripts/time_budget.py [--seed 1] [--fraction 0.5] [--out results/time_budget]
"""

import argparse
import json
from pathlib import Path

from loopmem import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--fraction", type=float, default=0.5)
    ap.add_argument("--calibration-frames", type=int, default=500)
    ap.add_argument("--out", type=Path, default=Path("results/time_budget"))
    args = ap.parse_args()

    res = bench.time_budget(seed=args.seed, fraction=args.fraction,
                            calibration_frames=args.calibration_frames)
    rep = dict(res.report)
    series = rep.pop("series")
    s = res.engine.series()
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "series.tsv", "w") as fh:
        fh.write("frame\tptime\twm_size\tvocab_size\ttransferred\n")
        for k, (pt, wm, vs, tr) in enumerate(zip(series["ptime"], series["wm_size"],
                                                 series["vocab_size"], s["transfers"])):
            fh.write(f"{k}\t{pt:.6f}\t{wm}\t{vs}\t{tr}\n")
    rep["unmanaged_cost"] = res.unmanaged
    rep["contraction_violations"] = len(bench.contraction_violations(res.engine.log.rows))
    if "after_p99" in rep:
        rep["p99_over_t_time"] = rep["after_p99"] / res.t_time
        rep["mean_over_t_time"] = rep["after_mean"] / res.t_time
    (args.out / "summary.json").write_text(json.dumps(rep, indent=2) + "\n")
    print(json.dumps(rep, indent=2))


if __name__ == "__main__":
    main()
