"""Precision/recall scoring of decision logs and processing-time summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from loopmem.ingest import GroundTruth

VACUOUS_PRECISION = 1.0
CONVENTION = "precision with zero detections is reported as 1.0"


@dataclass
class PrecisionRecall:
    precision: float
    recall: float
    true_positives: int
    detections: int
    ground_truth: int


def location_frames(rows) -> dict[int, set[int]]:
    """Frames absorbed by each location, following STM merges."""
    frames: dict[int, set[int]] = {}
    for row in rows:
        lid = row["location"]
        got = frames.setdefault(lid, set())
        got.add(row["frame"])
        merged = row.get("merged_from")
        if merged is not None:
            got |= frames.get(merged, set())
    return frames


def detections(rows, threshold=None):
    """``(frame, location)`` pairs detected by the run, or re-thresholded on ``p_new``."""
    out = []
    for row in rows:
        hyp = row.get("hypothesis")
        if hyp is None:
            continue
        if threshold is None:
            if row.get("accepted") is not None:
                out.append((row["frame"], row["accepted"]))
        elif row["p_new"] < threshold:
            out.append((row["frame"], hyp))
    return out


def is_true_positive(frame, location, frames_of, gt: GroundTruth) -> bool:
    truth = gt.matches.get(frame)
    if not truth:
        return False
    for g in frames_of.get(location, ()):
        for m in truth:
            if abs(g - m) <= gt.margin:
                return True
    return False


def score(rows, gt: GroundTruth, threshold=None) -> PrecisionRecall:
    frames_of = location_frames(rows)
    dets = detections(rows, threshold)
    tp = sum(is_true_positive(f, loc, frames_of, gt) for f, loc in dets)
    n_gt = len(gt.loop_frames())
    precision = tp / len(dets) if dets else VACUOUS_PRECISION
    recall = tp / n_gt if n_gt else 0.0
    return PrecisionRecall(precision, recall, tp, len(dets), n_gt)


@dataclass
class SweepPoint:
    t_loop: float
    precision: float
    recall: float
    detections: int
    approximate: bool


def sweep(rows, gt: GroundTruth, thresholds) -> list[SweepPoint]:
    """Re-threshold recorded ``p_new`` values.

    A point is flagged approximate when its acceptances differ from the ones
    the run actually made, since those shaped links and memory afterwards.
    """
    recorded = {f for f, _ in detections(rows)}
    out = []
    for t in thresholds:
        pr = score(rows, gt, t)
        accepted = {f for f, _ in detections(rows, t)}
        out.append(SweepPoint(float(t), pr.precision, pr.recall, pr.detections, accepted != recorded))
    return out


def best_operating_point(points) -> SweepPoint | None:
    """Smallest threshold reaching the highest recall at 100% precision."""
    exact = [p for p in points if p.precision >= 1.0]
    if not exact:
        return None
    top = max(p.recall for p in exact)
    return min((p for p in exact if p.recall == top), key=lambda p: p.t_loop)


def threshold_grid(start, stop, step):
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 12) for k in range(max(n, 0))]


def timing_report(ptime, wm_size, vocab_size, transfers, t_time) -> dict:
    """Summary of a run's processing-time series.

    ``transfers`` holds the number of locations transferred per frame.
    Statistics after the first transfer event are what a time budget is
    judged on.
    """
    ptime = np.asarray(ptime, dtype=float)
    transfers = np.asarray(transfers, dtype=int)
    rep = {
        "frames": len(ptime),
        "transfer_events": int((transfers > 0).sum()),
        "max_ptime": float(ptime.max()) if len(ptime) else 0.0,
        "mean_ptime": float(ptime.mean()) if len(ptime) else 0.0,
        "t_time": float(t_time),
    }
    if math.isfinite(t_time) and len(ptime):
        rep["max_ratio"] = rep["max_ptime"] / t_time
    hits = np.flatnonzero(transfers > 0)
    if len(hits):
        after = ptime[hits[0] + 1:]
        rep["first_transfer"] = int(hits[0])
        if len(after):
            rep["after_mean"] = float(after.mean())
            rep["after_p99"] = float(np.percentile(after, 99))
            rep["after_max"] = float(after.max())
    rep["series"] = {
        "ptime": ptime.tolist(),
        "wm_size": list(map(int, wm_size)),
        "vocab_size": list(map(int, vocab_size)),
    }
    return rep
