"""Locations, signatures and the short-term / working memory graph."""

from __future__ import annotations

import enum
import logging
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from loopmem.config import EngineConfig
from loopmem.vocabulary import DimensionError, InternalFault, Vocabulary

log = logging.getLogger(__name__)


class Zone(enum.Enum):
    STM = "stm"
    WM = "wm"
    LTM = "ltm"
    TRASH = "trash"


class Signature:
    """Multiset of word ids describing one image."""

    __slots__ = ("words",)

    def __init__(self, words=None):
        self.words: Counter[int] = Counter(words or ())

    @property
    def word_count(self) -> int:
        return sum(self.words.values())

    def copy(self) -> Signature:
        return Signature(self.words)

    def distinct(self):
        return self.words.keys()

    def __eq__(self, other):
        return isinstance(other, Signature) and self.words == other.words

    def __repr__(self):
        return f"Signature({dict(sorted(self.words.items()))})"


def pair_count(z_a: Signature, z_b: Signature) -> int:
    a, b = z_a.words, z_b.words
    if len(a) > len(b):
        a, b = b, a
    return sum(min(c, b[w]) for w, c in a.items() if w in b)


def similarity(z_a: Signature, z_b: Signature) -> float:
    """Matched word pairs over the larger signature size; 0 for two empty signatures."""
    n = max(z_a.word_count, z_b.word_count)
    if n == 0:
        return 0.0
    return pair_count(z_a, z_b) / n


@dataclass
class Location:
    id: int
    signature: Signature
    weight: int = 0
    neighbor_links: set[int] = field(default_factory=set)
    loop_links: set[int] = field(default_factory=set)
    zone: Zone = Zone.STM

    def links(self):
        return self.neighbor_links | self.loop_links


class BadSignature:
    """Returned by :meth:`MemoryGraph.create_location` for images with too few features."""

    def __init__(self, kept: int, threshold: float):
        self.kept = kept
        self.threshold = threshold

    def __repr__(self):
        return f"BadSignature(kept={self.kept}, threshold={self.threshold:.3f})"


@dataclass
class RunningStats:
    avg_features_per_image: float | None = None
    accepted_images: int = 0
    n_l: int = 0
    w_l: int = 0

    def add_image(self, kept: int):
        self.accepted_images += 1
        if self.avg_features_per_image is None:
            self.avg_features_per_image = float(kept)
        else:
            self.avg_features_per_image += (kept - self.avg_features_per_image) / self.accepted_images


@dataclass
class MergeOutcome:
    merged: bool
    absorbed_id: int | None = None
    similarity: float = 0.0


def select_features(features, t_max):
    """Indices of the ``t_max`` strongest features; equal responses keep input order."""
    responses = np.array([r for r, _ in features], dtype=np.float64)
    order = np.argsort(-responses, kind="stable")
    return order[:t_max]


class MemoryGraph:
    """Owns every in-memory location (STM and WM) and the vocabulary."""

    def __init__(self, config: EngineConfig, vocab: Vocabulary | None = None):
        self.config = config
        self.vocab = vocab or Vocabulary(
            dim=config.descriptor_dim, n_trees=config.nn_trees,
            checks=config.nn_checks, seed=config.rng_seed,
        )
        self.locations: dict[int, Location] = {}
        self.stm: deque[int] = deque()
        self.wm: set[int] = set()
        self.stats = RunningStats()
        self.next_location_id = 1
        self.last_location_id: int | None = None
        # words created while building the newest location, surviving so far
        self.new_word_ids: list[int] = []
        self.rejected_records = 0

    # queries -----------------------------------------------------------------

    def get(self, location_id) -> Location:
        try:
            return self.locations[location_id]
        except KeyError:
            raise InternalFault(f"location {location_id} is not in memory") from None

    @property
    def n_w(self):
        return len(self.wm)

    def wm_sorted(self) -> list[int]:
        return sorted(self.wm)

    # location creation ---------------------------------------------------------

    def is_bad(self, kept: int) -> tuple[bool, float]:
        avg = self.stats.avg_features_per_image
        if avg is None:
            return False, 0.0
        threshold = self.config.t_bad * avg
        return kept < threshold, threshold

    def create_location(self, features, *, build_index=True) -> Location | BadSignature:
        """Quantize an image's features into a new STM location.

        ``features`` is a sequence of ``(response, descriptor)`` pairs already
        filtered on response. Records whose descriptor has the wrong dimension
        are dropped.
        """
        cfg = self.config
        valid = []
        for resp, desc in features:
            d = np.asarray(desc, dtype=np.float32).reshape(-1)
            if d.shape[0] != cfg.descriptor_dim or not np.all(np.isfinite(d)) or not resp >= 0:
                self.rejected_records += 1
                continue
            valid.append((float(resp), d))
        keep = select_features(valid, cfg.t_max_features) if valid else []
        bad, threshold = self.is_bad(len(keep))
        if bad:
            return BadSignature(len(keep), threshold)

        if build_index:
            self.vocab.build_index()
        descs = np.stack([valid[k][1] for k in keep]) if len(keep) else np.empty((0, cfg.descriptor_dim), np.float32)
        try:
            results = self.vocab.quantize_many(descs, cfg.t_nndr)
        except DimensionError as exc:  # validated above, so this is a bug
            raise InternalFault(str(exc)) from exc

        lid = self.next_location_id
        self.next_location_id += 1
        sig = Signature(r.word_id for r in results)
        self.new_word_ids = sorted({r.word_id for r in results if r.created})
        loc = Location(lid, sig)
        self.locations[lid] = loc
        for wid in sig.distinct():
            self.vocab.add_reference(wid, lid)
        if self.last_location_id is not None and self.last_location_id in self.locations:
            self._link(loc, self.locations[self.last_location_id], loop=False)
        self.last_location_id = lid
        self.stats.add_image(len(keep))
        self.stm.append(lid)
        return loc

    # links ---------------------------------------------------------------------

    @staticmethod
    def _link(a: Location, b: Location, loop: bool):
        if loop:
            a.loop_links.add(b.id)
            b.loop_links.add(a.id)
        else:
            a.neighbor_links.add(b.id)
            b.neighbor_links.add(a.id)

    def add_loop_link(self, current_id, old_id):
        """Link an accepted hypothesis to the current location and move the weight over."""
        if current_id == old_id:
            raise InternalFault("loop closure on the current location")
        cur, old = self.get(current_id), self.get(old_id)
        if old.zone is not Zone.WM:
            raise InternalFault(f"hypothesis {old_id} is not in WM")
        cur.weight += old.weight
        old.weight = 0
        self._link(cur, old, loop=True)

    # weight update -------------------------------------------------------------

    def weight_update(self, new_id, on_external_links=None) -> MergeOutcome:
        """Merge the previous STM location into ``new_id`` when they are similar enough.

        ``on_external_links(old_id, new_id, ids)`` is called with the links of
        the absorbed location that point outside memory so the caller can
        redirect them in long-term storage.
        """
        if len(self.stm) < 2 or self.stm[-1] != new_id:
            return MergeOutcome(False)
        prev_id = self.stm[-2]
        new, prev = self.get(new_id), self.get(prev_id)
        s = similarity(new.signature, prev.signature)
        if s < self.config.t_similarity:
            return MergeOutcome(False, similarity=s)

        vocab = self.vocab
        for wid in new.signature.distinct():
            vocab.remove_reference(wid, new_id)
        vocab.remove_new_words(self.new_word_ids)
        self.new_word_ids = []
        new.signature = prev.signature.copy()
        for wid in new.signature.distinct():
            vocab.remove_reference(wid, prev_id)
            vocab.add_reference(wid, new_id)
        new.weight += prev.weight + 1

        external = []
        for kind in ("neighbor_links", "loop_links"):
            for other_id in getattr(prev, kind):
                if other_id == new_id:
                    continue
                other = self.locations.get(other_id)
                getattr(new, kind).add(other_id)
                if other is None:
                    external.append(other_id)
                    continue
                links = getattr(other, kind)
                links.discard(prev_id)
                links.add(new_id)
        new.neighbor_links.discard(prev_id)
        new.loop_links.discard(prev_id)
        if external and on_external_links is not None:
            on_external_links(prev_id, new_id, external)

        self.stm.remove(prev_id)
        del self.locations[prev_id]
        return MergeOutcome(True, prev_id, s)

    def age_stm(self) -> int | None:
        """Promote the oldest STM location to WM once STM exceeds its capacity."""
        if len(self.stm) <= self.config.t_stm:
            return None
        lid = self.stm.popleft()
        self.locations[lid].zone = Zone.WM
        self.wm.add(lid)
        return lid

    # consistency -----------------------------------------------------------------

    def check_consistency(self):
        """Full scan of reference symmetry, link symmetry and zone bookkeeping."""
        vocab = self.vocab
        for lid, loc in self.locations.items():
            for wid in loc.signature.distinct():
                if wid not in vocab.words or lid not in vocab.words[wid].refs:
                    raise InternalFault(f"location {lid} uses word {wid} without a reference")
            for kind in ("neighbor_links", "loop_links"):
                for other in getattr(loc, kind):
                    o = self.locations.get(other)
                    if o is not None and lid not in getattr(o, kind):
                        raise InternalFault(f"one-way {kind} {lid}->{other}")
        for wid, w in vocab.words.items():
            for lid in w.refs:
                loc = self.locations.get(lid)
                if loc is None or wid not in loc.signature.words:
                    raise InternalFault(f"word {wid} references stale location {lid}")
        if set(self.stm) & self.wm:
            raise InternalFault("location both in STM and WM")
        if set(self.stm) | self.wm != set(self.locations):
            raise InternalFault("zone sets do not cover memory")
        for lid in self.wm:
            if self.locations[lid].zone is not Zone.WM:
                raise InternalFault(f"WM location {lid} has zone {self.locations[lid].zone}")
