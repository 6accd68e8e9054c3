"""Descriptor streams and ground-truth files.

Text streams hold one JSON object per line::

    {"image_id": 3, "features": [{"r": 0.8, "d": [0.1, ...]}, ...]}

Files ending in ``.bin`` use a packed little-endian layout per record:
``int64 image_id, uint32 n_features, uint32 dim`` then ``n_features`` rows of
``float32 response`` followed by ``dim`` float32 values.
"""

from __future__ import annotations

import json
import logging
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_BIN_HEADER = struct.Struct("<qII")


class StreamError(OSError):
    pass


@dataclass
class FrameRecord:
    image_id: int
    responses: np.ndarray
    descriptors: np.ndarray

    @property
    def features(self):
        return list(zip(self.responses.tolist(), self.descriptors))

    def __len__(self):
        return len(self.responses)


@dataclass
class GroundTruth:
    matches: dict[int, set[int]] = field(default_factory=dict)
    margin: int = 10

    def loop_frames(self):
        return [f for f, m in self.matches.items() if m]


@dataclass
class StreamStats:
    read: int = 0
    skipped: int = 0


def _frame_from_obj(obj, dim):
    image_id = int(obj["image_id"])
    feats = obj["features"]
    responses = np.array([float(f["r"]) for f in feats], dtype=np.float32)
    if not feats:
        return FrameRecord(image_id, responses, np.empty((0, dim), dtype=np.float32))
    desc = np.array([f["d"] for f in feats], dtype=np.float32)
    if desc.ndim != 2 or desc.shape[1] != dim or not np.all(np.isfinite(desc)):
        raise ValueError("bad descriptor")
    if np.any(responses < 0) or not np.all(np.isfinite(responses)):
        raise ValueError("bad response")
    return FrameRecord(image_id, responses, desc)


def _read_text(fh, dim, stats):
    last = None
    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        try:
            frame = _frame_from_obj(json.loads(line), dim)
        except (ValueError, KeyError, TypeError) as exc:
            stats.skipped += 1
            log.warning("skipping malformed record at line %d: %s", lineno, exc)
            continue
        if last is not None and frame.image_id <= last:
            stats.skipped += 1
            log.warning("skipping out-of-order image_id %d at line %d", frame.image_id, lineno)
            continue
        last = frame.image_id
        stats.read += 1
        yield frame


def _read_bin(fh, dim, stats):
    last = None
    while True:
        head = fh.read(_BIN_HEADER.size)
        if not head:
            return
        if len(head) < _BIN_HEADER.size:
            stats.skipped += 1
            log.warning("truncated record header")
            return
        image_id, n, d = _BIN_HEADER.unpack(head)
        body = fh.read(4 * n * (d + 1))
        if len(body) < 4 * n * (d + 1):
            stats.skipped += 1
            log.warning("truncated record body for image %d", image_id)
            return
        rows = np.frombuffer(body, dtype="<f4").reshape(n, d + 1).astype(np.float32)
        if (n and d != dim) or not np.all(np.isfinite(rows)) or np.any(rows[:, 0] < 0) or (
            last is not None and image_id <= last
        ):
            stats.skipped += 1
            log.warning("skipping malformed binary record for image %d", image_id)
            continue
        last = image_id
        stats.read += 1
        desc = rows[:, 1:] if n else np.empty((0, dim), np.float32)
        yield FrameRecord(image_id, rows[:, 0].copy(), np.ascontiguousarray(desc))


def read_stream(path, dim=64, stats: StreamStats | None = None):
    """Yield frames from a stream file; malformed records are counted in ``stats`` and skipped."""
    path = Path(path)
    stats = stats if stats is not None else StreamStats()
    try:
        fh = open(path, "rb" if path.suffix == ".bin" else "r")
    except OSError as exc:
        raise StreamError(f"cannot read stream {path}: {exc}") from exc
    with fh:
        reader = _read_bin if path.suffix == ".bin" else _read_text
        yield from reader(fh, dim, stats)


def write_stream(path, frames):
    path = Path(path)
    if path.suffix == ".bin":
        with open(path, "wb") as fh:
            for f in frames:
                n, d = f.descriptors.shape
                fh.write(_BIN_HEADER.pack(f.image_id, n, d))
                rows = np.column_stack([f.responses, f.descriptors]).astype("<f4")
                fh.write(rows.tobytes())
        return
    with open(path, "w") as fh:
        for f in frames:
            feats = [{"r": float(r), "d": [float(x) for x in d]}
                     for r, d in zip(f.responses, f.descriptors)]
            fh.write(json.dumps({"image_id": f.image_id, "features": feats}) + "\n")


def read_ground_truth(path, margin=10) -> GroundTruth:
    matches = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            key, rest = line.split(":", 1)
            ids = {int(x) for x in rest.replace(" ", "").split(",") if x}
            matches[int(key)] = ids
        except ValueError as exc:
            raise StreamError(f"{path}:{lineno}: bad ground-truth line") from exc
    return GroundTruth(matches, margin)


def write_ground_truth(path, gt: GroundTruth):
    lines = [f"{f}: {','.join(str(i) for i in sorted(m))}" for f, m in sorted(gt.matches.items())]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def prefetch(frames, capacity=2):
    """Read frames on a helper thread, at most ``capacity`` ahead of the consumer."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    failure = []

    def pump():
        try:
            for f in frames:
                q.put(f)
        except BaseException as exc:  # re-raised on the consumer side
            failure.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=pump, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if failure:
        raise failure[0]
