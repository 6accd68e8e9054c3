"""The per-image loop: location creation, filtering, retrieval and transfer."""

from __future__ import annotations

import gc
import time
from collections import defaultdict
from dataclasses import dataclass, field

from loopmem import bayes
from loopmem.config import EngineConfig
from loopmem.ingest import FrameRecord
from loopmem.ltm import LtmStore
from loopmem.memory_graph import BadSignature, MemoryGraph
from loopmem.memory_management import MemoryManager


@dataclass
class FrameTiming:
    """``decision_time`` is what gets compared with the budget; ``ptime`` adds the transfer itself."""

    frame: int
    decision_time: float
    transfer_time: float = 0.0

    @property
    def ptime(self):
        return self.decision_time + self.transfer_time


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    bad: list[dict] = field(default_factory=list)
    timing: list[FrameTiming] = field(default_factory=list)


class Engine:
    """Processes frames one at a time and records every decision.

    Args:
        config: run parameters.
        ltm: long-term store; an in-memory SQLite database by default.
        check_invariants: verify posterior/transition normalization and
            memory bookkeeping after every frame (slow).
        freeze_gc: move surviving objects out of the cyclic collector's
            reach after each frame, so full collections do not land inside
            the timed part of a later frame.
    """

    def __init__(self, config: EngineConfig, ltm: LtmStore | None = None, check_invariants=False,
                 freeze_gc=True):
        self.config = config
        self.ltm = ltm if ltm is not None else LtmStore(":memory:")
        self.graph = MemoryGraph(config)
        self.manager = MemoryManager(self.graph, self.ltm)
        self.posterior = bayes.Posterior()
        self.log = RunLog()
        self.check_invariants = check_invariants
        self.invariant_checks = 0
        self._closed = False
        self.freeze_gc = freeze_gc

    # helpers ---------------------------------------------------------------

    def adjacency(self):
        """Snapshot of in-memory links; stored locations are absent (never expanded)."""
        adj = {i: tuple(loc.neighbor_links | loc.loop_links)
               for i, loc in self.graph.locations.items()}
        empty = ()
        return lambda node: adj.get(node, empty)

    def raw_scores(self, loc) -> dict[int, float]:
        """Similarity of ``loc`` to every WM location, via the words' back-references."""
        graph = self.graph
        wm = graph.wm
        pairs = defaultdict(int)
        words = graph.vocab.words
        for wid, c in loc.signature.words.items():
            for other in words[wid].refs:
                if other in wm:
                    pairs[other] += min(c, graph.locations[other].signature.words[wid])
        n_t = loc.signature.word_count
        scores = dict.fromkeys(wm, 0.0)
        for other, n in pairs.items():
            denom = max(n_t, graph.locations[other].signature.word_count)
            scores[other] = n / denom if denom else 0.0
        return scores

    def _check_filter(self, prev, links_of):
        cfg = self.config
        total = float(self.posterior.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise AssertionError(f"posterior sums to {total!r}")
        wm = sorted(self.graph.wm)
        states = set(prev.states)
        for s in prev.states:
            row = bayes.transition_row(s, wm, links_of, cfg.neighborhood_range, cfg.gaussian_sigma)
            if abs(sum(row.values()) - 1.0) > 1e-9:
                raise AssertionError(f"transition row {s} sums to {sum(row.values())!r}")
            if s != bayes.NEW_PLACE:
                loop = sum(v for k, v in row.items() if k != bayes.NEW_PLACE)
                if abs(loop - 0.9) > 1e-9:
                    raise AssertionError(f"loop mass from {s} is {loop!r}")
            if not set(row) <= states:
                raise AssertionError("transition row leaves the state set")
        self.invariant_checks += 1

    # main loop ------------------------------------------------------------------

    def process(self, frame: FrameRecord) -> dict | None:
        """Run one iteration; returns the decision row, or ``None`` for a bad image."""
        cfg = self.config
        graph, manager, vocab = self.graph, self.manager, self.graph.vocab
        keep = frame.responses >= cfg.t_response
        features = list(zip(frame.responses[keep].tolist(), frame.descriptors[keep]))

        t0 = time.perf_counter()
        vocab_start = len(vocab)
        loc = graph.create_location(features)
        if isinstance(loc, BadSignature):
            self.log.bad.append({"frame": frame.image_id, "reason": "bad_signature",
                                 "kept": loc.kept, "threshold": round(loc.threshold, 6)})
            return None
        indexed = len(vocab.indexed_ids)

        merge = graph.weight_update(loc.id, manager.redirect_links)
        graph.age_stm()

        prev = bayes.reconcile_states(self.posterior, graph.wm)
        lik = bayes.compute_likelihood(self.raw_scores(loc))
        links = self.adjacency()
        self.posterior = bayes.update_posterior(prev, lik, links,
                                                cfg.neighborhood_range, cfg.gaussian_sigma)
        if self.check_invariants:
            self._check_filter(prev, links)
        decision = bayes.select_hypothesis(self.posterior, cfg.t_loop)
        if decision.accepted:
            graph.add_loop_link(loc.id, decision.hypothesis)
            manager.last_loop_closure_id = loc.id

        manager.join()
        retrieval = manager.retrieve(decision.hypothesis)

        if cfg.clock == "ops":
            ptime = (indexed + len(prev.states) - 1) * cfg.ops_unit
        else:
            ptime = time.perf_counter() - t0

        nwa = len(graph.new_word_ids) + len(retrieval.reactivated_words)
        vocab_before_transfer = len(vocab)
        transfer = None
        t1 = time.perf_counter()
        if ptime > cfg.t_time:
            transfer = manager.transfer(decision.hypothesis, nwa)
        transfer_time = time.perf_counter() - t1 if cfg.clock == "wall" else 0.0
        if self.check_invariants:
            graph.check_consistency()

        row = {
            "frame": frame.image_id,
            "location": loc.id,
            "merged_from": merge.absorbed_id,
            "hypothesis": decision.hypothesis,
            "accepted": decision.accepted_id,
            "p_new": decision.p_new,
            "top3": [[s, p] for s, p in self.posterior.top(3)],
            "retrieved": retrieval.ids,
            "transferred": transfer.ids if transfer else [],
            "nwa": nwa,
            "nwt": transfer.nwt if transfer else 0,
            "saturated": bool(transfer and transfer.saturated),
            "vocab_start": vocab_start,
            "vocab_before_transfer": vocab_before_transfer,
            "vocab_size": len(vocab),
            "wm_size": len(graph.wm),
            "stm_size": len(graph.stm),
            "ltm_size": len(manager.ltm_ids),
        }
        self.log.rows.append(row)
        self.log.timing.append(FrameTiming(frame.image_id, ptime, transfer_time))
        if self.freeze_gc:
            gc.freeze()
        return row

    def run(self, frames):
        for f in frames:
            self.process(f)
        return self.log

    def close(self, persist=True) -> dict:
        """Wait for pending writes, store the in-memory map and compact remaps."""
        if self._closed:
            return {}
        self._closed = True
        self.manager.join()
        if persist:
            self.manager.persist_memory()
        return self.ltm.shutdown_compact()

    # reporting --------------------------------------------------------------------

    def series(self):
        rows = self.log.rows
        return {
            "ptime": [t.ptime for t in self.log.timing],
            "wm_size": [r["wm_size"] for r in rows],
            "vocab_size": [r["vocab_size"] for r in rows],
            "transfers": [len(r["transferred"]) for r in rows],
        }

