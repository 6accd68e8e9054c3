"""Reusable experiment drivers on synthetic worlds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from loopmem import metrics
from loopmem.config import EngineConfig
from loopmem.engine import Engine
from loopmem.ingest import GroundTruth
from loopmem.synth import SyntheticWorld, generate_world

TWO_TRAVERSAL_WORLD = SyntheticWorld(place_count=200, traversals=2, noise=0.05,
                                     dwell_segments=13, dwell_min=20, dwell_max=60)
BUDGET_WORLD = SyntheticWorld(place_count=1000, traversals=3, noise=0.05)


def run_frames(frames, config: EngineConfig, **engine_kw) -> Engine:
    engine = Engine(config, **engine_kw)
    engine.run(frames)
    return engine


def unmanaged_cost(frames, config: EngineConfig, tail=50) -> float:
    """Mean pTime over the last ``tail`` frames of an unbounded run over ``frames``."""
    engine = run_frames(frames, config.with_(t_time=math.inf))
    values = [t.ptime for t in engine.log.timing[-tail:]]
    return float(np.mean(values))


def second_traversal_start(frames, gt: GroundTruth) -> int:
    """Index of the first frame that revisits a place."""
    first = min(gt.matches) if gt.matches else len(frames)
    return next(k for k, f in enumerate(frames) if f.image_id == first) if gt.matches else first


def ltm_fraction(row) -> float:
    total = row["ltm_size"] + row["wm_size"] + row["stm_size"]
    return row["ltm_size"] / total if total else 0.0


@dataclass
class DetectionResult:
    engine: Engine
    best: metrics.SweepPoint | None
    points: list
    ltm_fraction_at_revisit: float
    t_time: float
    actual: metrics.PrecisionRecall  # the run's own acceptances at its t_loop


def two_traversal(seed=0, world=TWO_TRAVERSAL_WORLD, margin=2, budget_fraction=None,
                  thresholds=None, t_loop=EngineConfig.t_loop, t_time=None) -> DetectionResult:
    """Run the two-pass world and sweep the loop threshold.

    ``budget_fraction=None`` runs without a time limit. Otherwise the run uses
    the deterministic work clock, with ``t_time`` set to that fraction of the
    unbounded cost reached at the end of the first traversal, unless
    ``t_time`` gives the budget directly.
    """
    frames, gt = generate_world(world, seed)
    gt.margin = margin
    start = second_traversal_start(frames, gt)
    config = EngineConfig(clock="ops", t_loop=t_loop, t_time=math.inf)
    if t_time is None:
        t_time = math.inf
        if budget_fraction is not None:
            t_time = budget_fraction * unmanaged_cost(frames[:start], config, tail=1)
    engine = run_frames(frames, config.with_(t_time=t_time))
    rows = engine.log.rows
    before = [r for r in rows if r["frame"] < frames[start].image_id]
    frac = ltm_fraction(before[-1]) if before else 0.0
    thresholds = thresholds or metrics.threshold_grid(0.0, 1.0, 0.01)
    points = metrics.sweep(rows, gt, thresholds)
    return DetectionResult(engine, metrics.best_operating_point(points), points, frac, t_time,
                           metrics.score(rows, gt))


@dataclass
class BudgetResult:
    engine: Engine
    t_time: float
    unmanaged: float
    report: dict


def time_budget(seed=1, world=BUDGET_WORLD, calibration_frames=500, fraction=0.5,
                frames_limit=None) -> BudgetResult:
    """Wall-clock budget run: calibrate the unbounded cost on a prefix, then run at ``fraction`` of it."""
    frames, _ = generate_world(world, seed)
    if frames_limit:
        frames = frames[:frames_limit]
    config = EngineConfig()
    cost = unmanaged_cost(frames[:calibration_frames], config)
    t_time = fraction * cost
    engine = run_frames(frames, config.with_(t_time=t_time))
    s = engine.series()
    rep = metrics.timing_report(s["ptime"], s["wm_size"], s["vocab_size"], s["transfers"], t_time)
    return BudgetResult(engine, t_time, cost, rep)


def contraction_violations(rows) -> list[dict]:
    """Frames where a completed transfer did not shrink the vocabulary below its size at frame start."""
    return [r for r in rows
            if r["transferred"] and r["nwt"] >= r["nwa"] and not r["vocab_size"] < r["vocab_start"]]
