"""Command-line driver.

    loopmem run   --config FILE --stream FILE --ltm FILE --report DIR [--gt FILE]
    loopmem synth --spec FILE --seed N --out FILE
    loopmem sweep --report DIR --from X --to Y --step Z

Exit codes: 0 success, 1 unreadable input, 2 configuration error, 3 persistence fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from loopmem import metrics
from loopmem.config import ConfigError, format_config, load_config
from loopmem.engine import Engine
from loopmem.ingest import (GroundTruth, StreamError, StreamStats, prefetch, read_ground_truth,
                            read_stream, write_ground_truth, write_stream)
from loopmem.ltm import LtmStore, PersistenceError
from loopmem.synth import generate_world, load_world

log = logging.getLogger("loopmem")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_PERSIST = 0, 1, 2, 3

DECISIONS = "decisions.jsonl"
GT_COPY = "ground_truth.txt"


def ground_truth_path(stream_path) -> Path:
    """Where ``synth`` puts the ground truth for a stream file."""
    p = Path(stream_path)
    return p.with_name(p.name + ".gt")


def _dump_row(row) -> str:
    return json.dumps(row, separators=(",", ":"), sort_keys=False)


def _write_series(path: Path, values, fmt="{!r}"):
    path.write_text("".join(fmt.format(v) + "\n" for v in values))


def write_report(report: Path, engine: Engine, stats: StreamStats, gt: GroundTruth | None,
                 status: str, compact: dict | None):
    report.mkdir(parents=True, exist_ok=True)
    rows = engine.log.rows
    (report / DECISIONS).write_text("".join(_dump_row(r) + "\n" for r in rows))
    (report / "bad_frames.jsonl").write_text("".join(_dump_row(b) + "\n" for b in engine.log.bad))
    (report / "config.txt").write_text(format_config(engine.config))
    series = engine.series()
    for name in ("ptime", "wm_size", "vocab_size", "transfers"):
        _write_series(report / f"{name}.txt", series[name])

    timing = metrics.timing_report(series["ptime"], series["wm_size"], series["vocab_size"],
                                   series["transfers"], engine.config.t_time)
    lines = [
        f"status = {status}",
        f"seed = {engine.config.rng_seed}",
        f"frames_read = {stats.read}",
        f"frames_skipped = {stats.skipped}",
        f"frames_bad = {len(engine.log.bad)}",
        f"frames_processed = {len(rows)}",
        f"loop_closures = {sum(r['accepted'] is not None for r in rows)}",
        f"transfer_events = {timing['transfer_events']}",
        f"mean_ptime = {timing['mean_ptime']:.6g}",
        f"max_ptime = {timing['max_ptime']:.6g}",
    ]
    for key in ("max_ratio", "after_mean", "after_p99", "after_max"):
        if key in timing:
            lines.append(f"{key} = {timing[key]:.6g}")
    if compact:
        lines += [f"compact_{k} = {v}" for k, v in sorted(compact.items())]
    if gt is not None:
        write_ground_truth(report / GT_COPY, gt)
        pr = metrics.score(rows, gt)
        lines += [
            f"margin = {gt.margin}",
            f"precision = {pr.precision:.6f}",
            f"recall = {pr.recall:.6f}",
            f"true_positives = {pr.true_positives}",
            f"detections = {pr.detections}",
            f"ground_truth_frames = {pr.ground_truth}",
        ]
    lines.append(f"convention = {metrics.CONVENTION}")
    (report / "metrics.txt").write_text("\n".join(lines) + "\n")


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    gt = None
    gt_file = Path(args.gt) if args.gt else ground_truth_path(args.stream)
    if args.gt or gt_file.exists():
        try:
            gt = read_ground_truth(gt_file, args.margin)
        except (StreamError, OSError) as exc:
            log.error("%s", exc)
            return EXIT_INPUT
    try:
        ltm = LtmStore(args.ltm, fresh=True)
    except PersistenceError as exc:
        log.error("%s", exc)
        return EXIT_PERSIST

    engine = Engine(config, ltm)
    stats = StreamStats()
    report = Path(args.report)
    status, code, compact = "ok", EXIT_OK, None
    try:
        for frame in prefetch(read_stream(args.stream, config.descriptor_dim, stats)):
            engine.process(frame)
        compact = engine.close()
    except StreamError as exc:
        log.error("%s", exc)
        status, code = "input error", EXIT_INPUT
    except PersistenceError as exc:
        log.error("persistence fault, halting: %s", exc)
        status, code = "persistence fault", EXIT_PERSIST
    finally:
        ltm.close()
    write_report(report, engine, stats, gt, status, compact)
    if stats.skipped:
        log.warning("skipped %d malformed records", stats.skipped)
    return code


def cmd_synth(args) -> int:
    try:
        world = load_world(args.spec)
    except (ConfigError, OSError) as exc:
        log.error("world spec error: %s", exc)
        return EXIT_CONFIG
    frames, gt = generate_world(world, args.seed)
    write_stream(args.out, frames)
    write_ground_truth(ground_truth_path(args.out), gt)
    return EXIT_OK


def cmd_sweep(args) -> int:
    report = Path(args.report)
    try:
        rows = [json.loads(line) for line in (report / DECISIONS).read_text().splitlines() if line]
        gt = read_ground_truth(report / GT_COPY, args.margin)
    except (OSError, StreamError, ValueError) as exc:
        log.error("cannot read report: %s", exc)
        return EXIT_INPUT
    points = metrics.sweep(rows, gt, metrics.threshold_grid(args.start, args.stop, args.step))
    out = ["t_loop precision recall detections approximate"]
    out += [f"{p.t_loop:.6g} {p.precision:.6f} {p.recall:.6f} {p.detections} {int(p.approximate)}"
            for p in points]
    best = metrics.best_operating_point(points)
    out.append(f"# best t_loop = {best.t_loop:.6g} recall = {best.recall:.6f}" if best
               else "# no threshold reaches 100% precision")
    out.append(f"# {metrics.CONVENTION}")
    text = "\n".join(out) + "\n"
    (report / "sweep.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopmem", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process a descriptor stream")
    run.add_argument("--config", required=True)
    run.add_argument("--stream", required=True)
    run.add_argument("--ltm", required=True)
    run.add_argument("--report", required=True)
    run.add_argument("--gt", help="ground-truth file (default: <stream>.gt if present)")
    run.add_argument("--margin", type=int, default=10)
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser("synth", help="generate a synthetic stream with ground truth")
    synth.add_argument("--spec", required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)

    sweep = sub.add_parser("sweep", help="precision/recall over a threshold range")
    sweep.add_argument("--report", required=True)
    sweep.add_argument("--from", dest="start", type=float, required=True)
    sweep.add_argument("--to", dest="stop", type=float, required=True)
    sweep.add_argument("--step", type=float, required=True)
    sweep.add_argument("--margin", type=int, default=10)
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
