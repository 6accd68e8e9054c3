"""Retrieval from and transfer to long-term memory under a time budget."""

from __future__ import annotations

import logging
import math
import threading
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from loopmem.ltm import LocationRecord, LtmStore, PersistenceError
from loopmem.memory_graph import Location, MemoryGraph, Signature, Zone
from loopmem.vocabulary import InternalFault, Word

log = logging.getLogger(__name__)


@dataclass
class TrashBuffer:
    locations: list[LocationRecord] = field(default_factory=list)
    words: list[Word] = field(default_factory=list)

    def __bool__(self):
        return bool(self.locations or self.words)


@dataclass
class RetrievalResult:
    ids: list[int] = field(default_factory=list)
    reactivated_words: list[int] = field(default_factory=list)
    remaps: dict[int, int] = field(default_factory=dict)


@dataclass
class TransferResult:
    ids: list[int] = field(default_factory=list)
    nwa: int = 0
    nwt: int = 0
    saturated: bool = False


def snapshot(loc: Location) -> LocationRecord:
    return LocationRecord(
        loc.id, loc.weight, Counter(loc.signature.words),
        set(loc.neighbor_links), set(loc.loop_links),
    )


def time_neighbors(graph: MemoryGraph, center, max_hops) -> set[int]:
    """In-memory locations within ``max_hops`` neighbor links of ``center``."""
    if center not in graph.locations:
        return set()
    hops = {center: 0}
    queue = deque([center])
    while queue:
        node = queue.popleft()
        if hops[node] == max_hops:
            continue
        for other in graph.locations[node].neighbor_links:
            if other not in hops and other in graph.locations:
                hops[other] = hops[node] + 1
                queue.append(other)
    hops.pop(center)
    return set(hops)


def recent_protected(graph: MemoryGraph, last_loop_id, t_recent) -> set[int]:
    """WM locations created after the last loop closure that stay in WM.

    When there are more of them than ``ceil(t_recent * N_WM)``, only that many
    of the highest-weighted ones (newest first on ties) remain protected.
    """
    recent = [i for i in graph.wm if i > last_loop_id]
    cap = math.ceil(t_recent * len(graph.wm))
    if len(recent) <= cap:
        return set(recent)
    recent.sort(key=lambda i: (graph.locations[i].weight, i))
    return set(recent[len(recent) - cap:]) if cap else set()


class MemoryManager:
    """Moves locations between working memory and the long-term store.

    Transferred locations go to a trash buffer that a background thread
    flushes to the store; :meth:`join` waits for it and re-raises any
    persistence failure.
    """

    def __init__(self, graph: MemoryGraph, ltm: LtmStore):
        self.graph = graph
        self.ltm = ltm
        self.config = graph.config
        self.ltm_ids: set[int] = set(ltm.location_ids())
        self.trash = TrashBuffer()
        self.last_loop_closure_id = 0
        self.retrieved_this_iteration: set[int] = set()
        self._thread: threading.Thread | None = None
        self._error: BaseException | None = None

    # links seen from memory --------------------------------------------------------

    def memory_links(self, location_id):
        loc = self.graph.locations.get(location_id)
        if loc is None:
            return None
        return loc.neighbor_links, loc.loop_links

    # persistence ------------------------------------------------------------------

    def _flush(self, trash: TrashBuffer):
        for attempt in (1, 2):
            try:
                words = [(w.id, w.descriptor) for w in trash.words]
                self.ltm.put_locations(trash.locations)
                trash.locations = []
                self.ltm.put_words(words)
                trash.words = []
                return
            except PersistenceError as exc:
                log.warning("LTM flush attempt %d failed: %s", attempt, exc)
                if attempt == 2:
                    self._error = exc

    def start_flush(self):
        if not self.trash:
            return
        self.join()
        trash, self.trash = self.trash, TrashBuffer()
        self._thread = threading.Thread(target=self._flush, args=(trash,), daemon=True)
        self._thread.start()

    def join(self):
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        if self._error is not None:
            err, self._error = self._error, None
            raise PersistenceError(f"LTM flush failed: {err}") from err

    def redirect_links(self, old_id, new_id, external_ids):
        """Called when a merged-away STM location had links to stored locations."""
        self.join()
        self.ltm.redirect_links(old_id, new_id)

    # retrieval ---------------------------------------------------------------------

    def retrieval_candidates(self, hypothesis) -> list[int]:
        order = self.ltm.get_neighborhood(
            hypothesis, self.config.neighborhood_range, only_ltm_resident=False,
            memory_links=self.memory_links,
        )
        return [i for i in order if i in self.ltm_ids]

    def retrieve(self, hypothesis) -> RetrievalResult:
        """Bring up to ``retrieval_max`` stored neighbours of ``hypothesis`` back into WM."""
        self.retrieved_this_iteration = set()
        result = RetrievalResult()
        if hypothesis is None or self.config.retrieval_max == 0:
            return result
        graph, vocab, cfg = self.graph, self.graph.vocab, self.config
        try:
            ids = self.retrieval_candidates(hypothesis)[: cfg.retrieval_max]
            if not ids:
                return result
            records = self.ltm.get_locations(ids)
            records = {i: r for i, r in records.items() if r is not None}
            stale = sorted({w for r in records.values() for w in r.words if w not in vocab})
            descriptors = self.ltm.get_words(stale)
        except PersistenceError as exc:
            log.error("retrieval skipped, LTM read failed: %s", exc)
            return result
        missing = [w for w in stale if w not in descriptors]
        if missing:
            raise InternalFault(f"stored words missing from LTM: {missing[:5]}")

        if vocab.index_stale:
            vocab.build_index()
        hits = vocab.forest.query(np.stack([descriptors[w] for w in stale])) if stale else None
        for k, wid in enumerate(stale):
            desc = descriptors[wid]
            i1, d1, i2, d2 = vocab.nearest_two(desc, (hits[0][k], hits[1][k]))
            if i1 >= 0 and i2 >= 0 and d1 < cfg.t_nndr * d2:
                result.remaps[wid] = i1
            else:
                vocab.reinsert(Word(wid, desc))
                result.reactivated_words.append(wid)

        for lid in ids:
            rec = records.get(lid)
            if rec is None:
                continue
            words = Counter()
            for wid, c in rec.words.items():
                words[result.remaps.get(wid, wid)] += c
            loc = Location(lid, Signature(words), rec.weight,
                           set(rec.neighbor_links), set(rec.loop_links), Zone.WM)
            graph.locations[lid] = loc
            graph.wm.add(lid)
            for wid in words:
                vocab.add_reference(wid, lid)
            result.ids.append(lid)

        self.ltm.delete_locations(result.ids)
        self.ltm.delete_words(result.reactivated_words)
        self.ltm.put_remaps(result.remaps)
        self.ltm_ids.difference_update(result.ids)
        self.retrieved_this_iteration = set(result.ids)
        return result

    # transfer ---------------------------------------------------------------------

    def protected(self, hypothesis) -> set[int]:
        cfg = self.config
        keep = set(self.retrieved_this_iteration)
        keep |= recent_protected(self.graph, self.last_loop_closure_id, cfg.t_recent)
        if hypothesis is not None:
            keep.add(hypothesis)
            keep |= time_neighbors(self.graph, hypothesis, cfg.neighborhood_range)
        return keep

    def transferable(self, hypothesis) -> list[int]:
        """WM locations in the order they would be transferred (lowest weight, then oldest)."""
        keep = self.protected(hypothesis)
        locs = self.graph.locations
        return sorted((i for i in self.graph.wm if i not in keep),
                      key=lambda i: (locs[i].weight, i))

    def move_to_trash(self, location_id) -> int:
        """Take one WM location out of memory; returns how many words went with it."""
        graph, vocab = self.graph, self.graph.vocab
        loc = graph.get(location_id)
        if loc.zone is not Zone.WM:
            raise InternalFault(f"location {location_id} is not in WM")
        orphans = []
        for wid in loc.signature.distinct():
            vocab.remove_reference(wid, location_id)
            if not vocab.words[wid].refs:
                orphans.append(wid)
        words = vocab.deactivate(orphans)
        loc.zone = Zone.TRASH
        self.trash.locations.append(snapshot(loc))
        self.trash.words.extend(words)
        graph.wm.discard(location_id)
        del graph.locations[location_id]
        self.ltm_ids.add(location_id)
        return len(words)

    def transfer(self, hypothesis, nwa) -> TransferResult:
        """Transfer until more words left the vocabulary than this iteration added.

        The candidate order is fixed at the start: weights and the protected
        set do not change while transferring.
        """
        result = TransferResult(nwa=nwa)
        if nwa <= 0:
            return result
        order = self.transferable(hypothesis)
        for lid in order:
            if result.nwt > nwa:
                break
            result.nwt += self.move_to_trash(lid)
            result.ids.append(lid)
        if result.nwt <= nwa:
            result.saturated = True
            log.warning("transfer saturated: %d words out for %d added", result.nwt, nwa)
        self.start_flush()
        return result

    # shutdown ------------------------------------------------------------------------

    def persist_memory(self):
        """Write every in-memory location and active word to the store."""
        self.join()
        graph = self.graph
        self.ltm.put_locations(snapshot(graph.locations[i]) for i in sorted(graph.locations))
        self.ltm.put_words((w.id, w.descriptor) for w in graph.vocab.words.values())
