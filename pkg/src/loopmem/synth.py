"""Synthetic descriptor worlds with exact loop-closure ground truth."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from loopmem.config import ConfigError
from loopmem.ingest import FrameRecord, GroundTruth


@dataclass(frozen=True)
class SyntheticWorld:
    """A route over ``place_count`` places.

    Each place owns ``features_per_place`` private descriptors plus
    ``common_per_place`` descriptors drawn from a shared pool, which produces
    weak perceptual aliasing between places. ``noise`` is the per-frame
    Gaussian jitter relative to the descriptor norm; ``drift`` is the fraction
    of a place's private descriptors replaced each time it is revisited.

    When ``path`` is empty the route is ``traversals`` passes over all places
    in order, with ``dwell_segments`` places (spread over the passes) held for
    ``dwell_min``..``dwell_max`` consecutive frames.
    """

    place_count: int = 50
    traversals: int = 2
    features_per_place: int = 40
    common_pool_size: int = 100
    common_per_place: int = 8
    noise: float = 0.05
    drift: float = 0.0
    dwell_segments: int = 0
    dwell_min: int = 20
    dwell_max: int = 60
    descriptor_dim: int = 64
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.noise <= 1.0 and 0.0 <= self.drift <= 1.0):
            raise ConfigError("noise and drift must be in [0, 1]")
        if self.place_count < 1 or self.traversals < 1:
            raise ConfigError("place_count and traversals must be positive")
        if any(not 0 <= p < self.place_count for p in self.path):
            raise ConfigError("path refers to unknown places")
        if self.common_per_place > self.common_pool_size:
            raise ConfigError("common_per_place exceeds common_pool_size")
        if self.dwell_segments and not 1 <= self.dwell_min <= self.dwell_max:
            raise ConfigError("need 1 <= dwell_min <= dwell_max")


def load_world(path) -> SyntheticWorld:
    """Read a world from ``key = value`` lines (``path`` is a comma-separated list)."""
    kinds = {f.name: f.type for f in fields(SyntheticWorld)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, raw = (s.strip() for s in line.partition("="))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key == "path":
                values[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif kinds[key] in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}") from exc
    return replace(SyntheticWorld(), **values)


def build_path(world: SyntheticWorld, rng) -> list[int]:
    if world.path:
        return list(world.path)
    n, passes = world.place_count, world.traversals
    dwell = {}
    if world.dwell_segments:
        slots = [(t, p) for t in range(passes) for p in range(n)]
        picks = rng.choice(len(slots), size=min(world.dwell_segments, len(slots)), replace=False)
        for s in sorted(picks.tolist()):
            dwell[slots[s]] = int(rng.integers(world.dwell_min, world.dwell_max + 1))
    path = []
    for t in range(passes):
        for p in range(n):
            path += [p] * dwell.get((t, p), 1)
    return path


def _unit_rows(rng, k, dim):
    return (rng.standard_normal((k, dim)) / np.sqrt(dim)).astype(np.float32)


def generate_world(world: SyntheticWorld, seed: int = 0):
    """Frames and ground truth for ``world``; identical for identical ``(world, seed)``.

    A frame's ground truth lists every earlier frame of the same place that
    belongs to a previous visit (frames of the current dwell do not count).
    """
    rng = np.random.default_rng(seed)
    dim = world.descriptor_dim
    path = build_path(world, rng)
    pool = _unit_rows(rng, world.common_pool_size, dim)
    private = [_unit_rows(rng, world.features_per_place, dim) for _ in range(world.place_count)]
    common = [rng.choice(world.common_pool_size, world.common_per_place, replace=False)
              for _ in range(world.place_count)]
    strength = [rng.uniform(0.5, 1.0, world.features_per_place + world.common_per_place)
                for _ in range(world.place_count)]
    n_drift = int(round(world.drift * world.features_per_place))
    sigma = world.noise / np.sqrt(dim)

    frames, matches = [], {}
    visits: dict[int, list[list[int]]] = {}
    prev = None
    for image_id, p in enumerate(path):
        new_visit = p != prev
        if new_visit:
            if p in visits and n_drift:
                idx = rng.choice(world.features_per_place, n_drift, replace=False)
                private[p][idx] = _unit_rows(rng, n_drift, dim)
            visits.setdefault(p, []).append([])
        earlier = {f for v in visits[p][:-1] for f in v}
        if earlier:
            matches[image_id] = earlier
        visits[p][-1].append(image_id)
        prev = p

        latent = np.vstack([private[p], pool[common[p]]])
        desc = latent + sigma * rng.standard_normal(latent.shape)
        resp = strength[p] * rng.uniform(0.95, 1.05, len(latent))
        order = rng.permutation(len(latent))
        frames.append(FrameRecord(image_id, resp[order].astype(np.float32),
                                  desc[order].astype(np.float32)))
    return frames, GroundTruth(matches, margin=10)


def world_summary(world: SyntheticWorld, seed=0):
    """Path length and per-place visit structure, without generating descriptors."""
    path = build_path(world, np.random.default_rng(seed))
    runs = []
    for p in path:
        if runs and runs[-1][0] == p:
            runs[-1][1] += 1
        else:
            runs.append([p, 1])
    return {"frames": len(path), "dwells": [(p, n) for p, n in runs if n > 1]}
