"""Incremental visual vocabulary.

Every word is a single stored descriptor. Descriptors are quantized with the
nearest-neighbour distance ratio test against the words indexed in a kd-forest
rebuilt once per iteration, plus a linear scan over the words added since that
build.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from loopmem.kdforest import KdForest, scan_top2


class InternalFault(RuntimeError):
    """Bookkeeping inconsistency; the current iteration cannot continue."""


class DimensionError(ValueError):
    pass


@dataclass
class Word:
    id: int
    descriptor: np.ndarray
    refs: set[int] = field(default_factory=set)


@dataclass
class QuantizeResult:
    word_id: int
    created: bool


class _Pending:
    """Growable buffer holding descriptors not yet indexed."""

    def __init__(self, dim):
        self.data = np.empty((64, dim), dtype=np.float32)
        self.ids = np.empty(64, dtype=np.int64)
        self.n = 0

    def append(self, wid, desc):
        if self.n == len(self.ids):
            self.data = np.concatenate([self.data, np.empty_like(self.data)])
            self.ids = np.concatenate([self.ids, np.empty_like(self.ids)])
        self.data[self.n] = desc
        self.ids[self.n] = wid
        self.n += 1

    def remove(self, wids):
        keep = ~np.isin(self.ids[: self.n], list(wids))
        m = int(keep.sum())
        self.data[:m] = self.data[: self.n][keep]
        self.ids[:m] = self.ids[: self.n][keep]
        self.n = m

    def clear(self):
        self.n = 0


class Vocabulary:
    """Words currently active in working and short-term memory.

    Args:
        dim: descriptor dimension.
        n_trees: trees per forest.
        checks: search effort per query, or ``EXHAUSTIVE``.
        seed: seeds every forest build (mixed with the build counter).
    """

    def __init__(self, dim=64, n_trees=4, checks=64, seed=0):
        self.dim = dim
        self.n_trees = n_trees
        self.checks = checks
        self.seed = seed
        self.words: dict[int, Word] = {}
        self.indexed_ids: set[int] = set()
        self.unindexed_ids: set[int] = set()
        self.next_id = 1
        self.forest: KdForest | None = None
        self.builds = 0
        self._pending = _Pending(dim)
        self._dropped: set[int] = set()

    def __len__(self):
        return len(self.words)

    def __contains__(self, word_id):
        return word_id in self.words

    @property
    def size_w_w(self):
        return len(self.words)

    @property
    def index_stale(self) -> bool:
        """True when words were deactivated after the last build (the forest may return them)."""
        return self.forest is None or bool(self._dropped)

    # index -----------------------------------------------------------------

    def build_index(self) -> KdForest:
        """Rebuild the forest from every active word and clear the unindexed set."""
        # previous index rows minus deactivated words, plus the pending buffer
        p = self._pending
        if self.forest is not None:
            old_ids, old_data = self.forest.ids, self.forest.data
            if self._dropped:
                keep = ~np.isin(old_ids, np.fromiter(self._dropped, np.int64, len(self._dropped)))
                old_ids, old_data = old_ids[keep], old_data[keep]
            ids = np.concatenate([old_ids, p.ids[: p.n]])
            data = np.concatenate([old_data, p.data[: p.n]])
        else:
            ids, data = p.ids[: p.n].copy(), p.data[: p.n].copy()
        order = np.argsort(ids, kind="stable")
        ids, data = ids[order], data[order]
        if len(ids) != len(self.words):
            raise InternalFault("index rows out of sync with the vocabulary")
        seed = (self.seed * 1_000_003 + self.builds * self.n_trees) & 0x7FFFFFFF
        self.forest = KdForest(data, ids, n_trees=self.n_trees, checks=self.checks, seed=seed)
        self.builds += 1
        self.indexed_ids = set(self.words)
        self.unindexed_ids = set()
        self._pending.clear()
        self._dropped = set()
        return self.forest

    # quantization ------------------------------------------------------------

    def _check(self, desc):
        d = np.asarray(desc, dtype=np.float32).reshape(-1)
        if d.shape[0] != self.dim:
            raise DimensionError(f"descriptor has {d.shape[0]} values, expected {self.dim}")
        if not np.all(np.isfinite(d)):
            raise DimensionError("descriptor has non-finite values")
        return d

    def nearest_two(self, desc, forest_hit=None):
        """Global two nearest active words: ``(id1, d1, id2, d2)`` with plain distances.

        ``forest_hit`` is an optional precomputed ``(ids, sq_dists)`` row pair
        from a batch forest query.
        """
        if self.index_stale:
            raise InternalFault("quantization against a stale or missing index")
        if forest_hit is None:
            fi, fd = self.forest.query(desc[None, :])
            forest_hit = (fi[0], fd[0])
        fi, fd = forest_hit
        cands = [(float(fd[k]), int(fi[k])) for k in range(2) if fi[k] >= 0]
        p = self._pending
        if p.n:
            i1, d1, i2, d2 = scan_top2(desc, p.data, p.ids, p.n)
            cands += [(d, i) for d, i in ((d1, i1), (d2, i2)) if i >= 0]
        cands.sort()
        out = cands[:2] + [(math.inf, -1)] * (2 - min(2, len(cands)))
        return out[0][1], math.sqrt(out[0][0]), out[1][1], math.sqrt(out[1][0])

    def _decide(self, desc, t_nndr, forest_hit=None):
        i1, d1, i2, d2 = self.nearest_two(desc, forest_hit)
        if i1 >= 0 and i2 >= 0 and d1 < t_nndr * d2:
            return QuantizeResult(i1, False)
        return QuantizeResult(self.add_word(desc), True)

    def quantize(self, desc, t_nndr: float) -> QuantizeResult:
        """Match ``desc`` to an active word or create a new unindexed one."""
        return self._decide(self._check(desc), t_nndr)

    def quantize_many(self, descs, t_nndr: float) -> list[QuantizeResult]:
        """Quantize rows in order; words created by earlier rows are visible to later ones."""
        arr = np.ascontiguousarray(descs, dtype=np.float32)
        if arr.size == 0:
            return []
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise DimensionError(f"descriptors must be (n, {self.dim})")
        if self.forest is None:
            raise InternalFault("quantization before the index was built")
        fi, fd = self.forest.query(arr)
        return [self._decide(arr[k], t_nndr, (fi[k], fd[k])) for k in range(len(arr))]

    # word lifecycle -----------------------------------------------------------

    def add_word(self, desc) -> int:
        wid = self.next_id
        self.next_id += 1
        self.words[wid] = Word(wid, np.array(desc, dtype=np.float32))
        self.unindexed_ids.add(wid)
        self._pending.append(wid, desc)
        return wid

    def reinsert(self, word: Word):
        """Bring back a word from long-term memory under its original id (unindexed)."""
        if word.id in self.words:
            raise InternalFault(f"word {word.id} is already active")
        if word.id >= self.next_id:
            raise InternalFault(f"word {word.id} was never issued")
        desc = self._check(word.descriptor)
        self.words[word.id] = Word(word.id, desc)
        self.unindexed_ids.add(word.id)
        self._pending.append(word.id, desc)

    def _word(self, word_id) -> Word:
        try:
            return self.words[word_id]
        except KeyError:
            raise InternalFault(f"unknown word id {word_id}") from None

    def add_reference(self, word_id, location_id):
        self._word(word_id).refs.add(location_id)

    def remove_reference(self, word_id, location_id):
        refs = self._word(word_id).refs
        if location_id not in refs:
            raise InternalFault(f"word {word_id} has no reference to location {location_id}")
        refs.discard(location_id)

    def remove_new_words(self, word_ids):
        """Delete words created this iteration; their ids are retired."""
        word_ids = list(word_ids)
        for wid in word_ids:
            if wid not in self.unindexed_ids:
                raise InternalFault(f"word {wid} is not a new word of this iteration")
        for wid in word_ids:
            del self.words[wid]
            self.unindexed_ids.discard(wid)
        if word_ids:
            self._pending.remove(word_ids)

    def deactivate(self, word_ids) -> list[Word]:
        """Remove unreferenced words from the vocabulary and return them for storage."""
        out = []
        for wid in word_ids:
            w = self._word(wid)
            if w.refs:
                raise InternalFault(f"word {wid} is still referenced")
            del self.words[wid]
            if wid in self.indexed_ids:
                self.indexed_ids.discard(wid)
                self._dropped.add(wid)
            if wid in self.unindexed_ids:
                self.unindexed_ids.discard(wid)
                self._pending.remove([wid])
            out.append(Word(wid, w.descriptor.copy()))
        return out
