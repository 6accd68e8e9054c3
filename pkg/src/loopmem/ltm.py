"""Long-term memory: a single-file SQLite database of transferred locations.

Tables::

    signatures(location_id PK, weight, created_index, words BLOB)
    words(word_id PK, descriptor BLOB)
    links(from_id, to_id, link_type)   -- one row per undirected link, from_id < to_id
    remaps(old_word_id PK, new_word_id)

Descriptor blobs are little-endian float32 arrays. Signature blobs are
``uint32 n`` followed by ``n`` int64 deltas of the sorted distinct word ids and
``n`` uint32 counts, all little-endian.
"""

from __future__ import annotations

import logging
import sqlite3
import struct
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NEIGHBOR = 0
LOOP = 1

_SCHEMA = """
CREATE TABLE IF NOT EXISTS signatures (
    location_id INTEGER PRIMARY KEY,
    weight INTEGER NOT NULL,
    created_index INTEGER NOT NULL,
    words BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS words (
    word_id INTEGER PRIMARY KEY,
    descriptor BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS links (
    from_id INTEGER NOT NULL,
    to_id INTEGER NOT NULL,
    link_type INTEGER NOT NULL,
    PRIMARY KEY (from_id, to_id, link_type)
);
CREATE INDEX IF NOT EXISTS links_to ON links (to_id);
CREATE TABLE IF NOT EXISTS remaps (
    old_word_id INTEGER PRIMARY KEY,
    new_word_id INTEGER NOT NULL
);
"""


class PersistenceError(RuntimeError):
    pass


def encode_descriptor(desc) -> bytes:
    return np.asarray(desc, dtype="<f4").tobytes()


def decode_descriptor(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype="<f4").astype(np.float32)


def encode_signature(words: Counter) -> bytes:
    ids = np.array(sorted(words), dtype=np.int64)
    counts = np.array([words[i] for i in ids.tolist()], dtype="<u4")
    deltas = np.diff(ids, prepend=0).astype("<i8")
    return struct.pack("<I", len(ids)) + deltas.tobytes() + counts.tobytes()


def decode_signature(blob: bytes) -> Counter:
    (n,) = struct.unpack_from("<I", blob, 0)
    deltas = np.frombuffer(blob, dtype="<i8", count=n, offset=4)
    counts = np.frombuffer(blob, dtype="<u4", count=n, offset=4 + 8 * n)
    ids = np.cumsum(deltas)
    return Counter(dict(zip(ids.tolist(), counts.tolist())))


@dataclass
class LocationRecord:
    id: int
    weight: int
    words: Counter
    neighbor_links: set[int] = field(default_factory=set)
    loop_links: set[int] = field(default_factory=set)


class LtmStore:
    """Id-indexed store for locations, words, links and word-id remaps.

    One writer and one reader never overlap (the pipeline joins the flush
    thread before reading), but a lock still serializes connection use.
    """

    def __init__(self, path: str | Path = ":memory:", fresh=False):
        self.path = str(path)
        if fresh and self.path != ":memory:":
            for suffix in ("", "-wal", "-shm", "-journal"):
                Path(self.path + suffix).unlink(missing_ok=True)
        try:
            self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
            self._db.execute("PRAGMA journal_mode=WAL")
            self._db.execute("PRAGMA synchronous=NORMAL")
            self._db.executescript(_SCHEMA)
        except sqlite3.Error as exc:
            raise PersistenceError(f"cannot open LTM at {self.path}: {exc}") from exc
        self._lock = threading.RLock()
        self._remaps = dict(self._db.execute("SELECT old_word_id, new_word_id FROM remaps"))
        self.n_l = self._db.execute("SELECT COUNT(*) FROM signatures").fetchone()[0]
        self.w_l = self._db.execute("SELECT COUNT(*) FROM words").fetchone()[0]

    def close(self):
        with self._lock:
            self._db.close()

    # writes -----------------------------------------------------------------

    def _tx(self, fn):
        with self._lock:
            try:
                self._db.execute("BEGIN")
                out = fn(self._db)
                self._db.execute("COMMIT")
                return out
            except sqlite3.IntegrityError as exc:
                self._db.execute("ROLLBACK")
                raise PersistenceError(f"duplicate id: {exc}") from exc
            except sqlite3.Error as exc:
                if self._db.in_transaction:
                    self._db.execute("ROLLBACK")
                raise PersistenceError(str(exc)) from exc

    def put_locations(self, records):
        records = list(records)
        if not records:
            return 0

        def work(db):
            db.executemany(
                "INSERT INTO signatures VALUES (?, ?, ?, ?)",
                [(r.id, r.weight, r.id, encode_signature(r.words)) for r in records],
            )
            rows = []
            for r in records:
                for kind, links in ((NEIGHBOR, r.neighbor_links), (LOOP, r.loop_links)):
                    rows += [(min(r.id, o), max(r.id, o), kind) for o in links]
            db.executemany("INSERT OR IGNORE INTO links VALUES (?, ?, ?)", rows)

        self._tx(work)
        self.n_l += len(records)
        return len(records)

    def put_words(self, words):
        """``words`` is an iterable of ``(word_id, descriptor)``."""
        rows = [(int(wid), encode_descriptor(d)) for wid, d in words]
        if rows:
            self._tx(lambda db: db.executemany("INSERT INTO words VALUES (?, ?)", rows))
            self.w_l += len(rows)
        return len(rows)

    def put_remaps(self, remaps):
        rows = [(int(a), int(b)) for a, b in dict(remaps).items()]
        if rows:
            self._tx(lambda db: db.executemany("INSERT OR REPLACE INTO remaps VALUES (?, ?)", rows))
            self._remaps.update(rows)
        return len(rows)

    def delete_locations(self, ids):
        ids = [(int(i),) for i in ids]
        if not ids:
            return 0
        n = self._tx(lambda db: db.executemany(
            "DELETE FROM signatures WHERE location_id = ?", ids).rowcount)
        self.n_l -= n
        return n

    def delete_words(self, ids):
        ids = [(int(i),) for i in ids]
        if not ids:
            return 0
        n = self._tx(lambda db: db.executemany("DELETE FROM words WHERE word_id = ?", ids).rowcount)
        self.w_l -= n
        return n

    def redirect_links(self, old_id, new_id):
        """Re-point every stored link of ``old_id`` to ``new_id``."""

        def work(db):
            rows = db.execute(
                "SELECT from_id, to_id, link_type FROM links WHERE from_id = ? OR to_id = ?",
                (old_id, old_id),
            ).fetchall()
            db.execute("DELETE FROM links WHERE from_id = ? OR to_id = ?", (old_id, old_id))
            moved = []
            for a, b, kind in rows:
                other = b if a == old_id else a
                if other != new_id:
                    moved.append((min(other, new_id), max(other, new_id), kind))
            db.executemany("INSERT OR IGNORE INTO links VALUES (?, ?, ?)", moved)
            return len(moved)

        return self._tx(work)

    # reads ----------------------------------------------------------------------

    def contains(self, location_id) -> bool:
        with self._lock:
            return self._db.execute(
                "SELECT 1 FROM signatures WHERE location_id = ?", (int(location_id),)
            ).fetchone() is not None

    def location_ids(self) -> list[int]:
        with self._lock:
            return [r[0] for r in self._db.execute("SELECT location_id FROM signatures ORDER BY 1")]

    def links_of(self, location_id) -> tuple[set[int], set[int]]:
        with self._lock:
            rows = self._db.execute(
                "SELECT from_id, to_id, link_type FROM links WHERE from_id = ?1 OR to_id = ?1",
                (int(location_id),),
            ).fetchall()
        nbr, loop = set(), set()
        for a, b, kind in rows:
            (nbr if kind == NEIGHBOR else loop).add(b if a == location_id else a)
        return nbr, loop

    def resolve(self, word_id) -> int:
        """Follow the remap chain of ``word_id`` to its terminal id."""
        seen = set()
        while word_id in self._remaps:
            if word_id in seen:
                raise PersistenceError(f"remap cycle through word {word_id}")
            seen.add(word_id)
            word_id = self._remaps[word_id]
        return word_id

    def _resolve_counter(self, words: Counter) -> Counter:
        out = Counter()
        for wid, c in words.items():
            out[self.resolve(wid)] += c
        return out

    def get_locations(self, ids) -> dict[int, LocationRecord | None]:
        """Records keyed by id, with word ids resolved through the remap table.

        Missing ids map to ``None``. Signatures that needed resolving are
        rewritten in place.
        """
        out: dict[int, LocationRecord | None] = {}
        rewrites = []
        with self._lock:
            for lid in ids:
                row = self._db.execute(
                    "SELECT weight, words FROM signatures WHERE location_id = ?", (int(lid),)
                ).fetchone()
                if row is None:
                    out[lid] = None
                    continue
                stored = decode_signature(row[1])
                words = self._resolve_counter(stored)
                if words != stored:
                    rewrites.append((encode_signature(words), int(lid)))
                nbr, loop = self.links_of(lid)
                out[lid] = LocationRecord(int(lid), row[0], words, nbr, loop)
        if rewrites:
            self._tx(lambda db: db.executemany(
                "UPDATE signatures SET words = ? WHERE location_id = ?", rewrites))
        return out

    def get_words(self, ids) -> dict[int, np.ndarray]:
        out = {}
        with self._lock:
            for wid in ids:
                row = self._db.execute(
                    "SELECT descriptor FROM words WHERE word_id = ?", (int(wid),)
                ).fetchone()
                if row is not None:
                    out[wid] = decode_descriptor(row[0])
        return out

    def word_ids(self) -> list[int]:
        with self._lock:
            return [r[0] for r in self._db.execute("SELECT word_id FROM words ORDER BY 1")]

    @property
    def remaps(self) -> dict[int, int]:
        return dict(self._remaps)

    def get_neighborhood(self, center_id, max_hops=16, only_ltm_resident=True,
                         memory_links=None) -> list[int]:
        """Locations around ``center_id``, in retrieval priority order.

        Locations reachable through neighbor links alone come first (nearby in
        time), then those that need a loop-closure link (nearby in space).
        Each group is sorted by hop count, newest id first within a hop.
        ``memory_links(id)`` returns ``(neighbor_ids, loop_ids)`` for locations
        held in memory, or ``None`` to fall back to the link table.
        """

        def links(node):
            got = memory_links(node) if memory_links is not None else None
            return got if got is not None else self.links_of(node)

        if memory_links is None or memory_links(center_id) is None:
            if not self.contains(center_id):
                return []

        def bfs(use_loops):
            hops = {center_id: 0}
            queue = deque([center_id])
            while queue:
                node = queue.popleft()
                h = hops[node]
                if h == max_hops:
                    continue
                nbr, loop = links(node)
                for other in sorted(nbr | loop if use_loops else nbr):
                    if other not in hops:
                        hops[other] = h + 1
                        queue.append(other)
            del hops[center_id]
            return hops

        time_hops = bfs(False)
        space_hops = {k: v for k, v in bfs(True).items() if k not in time_hops}
        ordered = sorted(time_hops, key=lambda i: (time_hops[i], -i))
        ordered += sorted(space_hops, key=lambda i: (space_hops[i], -i))
        if only_ltm_resident:
            ordered = [i for i in ordered if self.contains(i)]
        return ordered

    # maintenance ----------------------------------------------------------------

    def shutdown_compact(self) -> dict[str, int]:
        """Apply all remaps to stored signatures, drop orphaned old words, clear remaps."""
        if not self._remaps:
            return {"signatures_rewritten": 0, "words_deleted": 0}
        with self._lock:
            rows = self._db.execute("SELECT location_id, words FROM signatures").fetchall()
        rewrites = []
        referenced = set()
        for lid, blob in rows:
            stored = decode_signature(blob)
            words = self._resolve_counter(stored)
            referenced.update(words)
            if words != stored:
                rewrites.append((encode_signature(words), lid))
        orphans = [(w,) for w in self._remaps if w not in referenced]

        def work(db):
            db.executemany("UPDATE signatures SET words = ? WHERE location_id = ?", rewrites)
            n = db.executemany("DELETE FROM words WHERE word_id = ?", orphans).rowcount
            db.execute("DELETE FROM remaps")
            return n

        deleted = self._tx(work)
        self.w_l -= deleted
        self._remaps.clear()
        return {"signatures_rewritten": len(rewrites), "words_deleted": deleted}
