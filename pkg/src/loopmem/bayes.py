"""Discrete Bayes filter over loop-closure hypotheses.

State ``NEW_PLACE`` (-1) means the current image shows a place not yet in
working memory; every other state is a WM location id.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NEW_PLACE = -1
P_NEW_AFTER_NEW = 0.9
P_LOOP_AFTER_NEW = 0.1
P_NEW_AFTER_LOOP = 0.1
LOOP_MASS = 0.9


@dataclass
class Likelihood:
    scores: dict[int, float]
    raw: dict[int, float]
    mu: float
    sigma: float


class Posterior:
    """Probability vector over ``NEW_PLACE`` followed by WM ids in increasing order."""

    def __init__(self, states=None, probs=None):
        self.states: list[int] = [NEW_PLACE] if states is None else list(states)
        if probs is None:
            probs = np.zeros(len(self.states))
            probs[0] = 1.0
        self.probs = np.asarray(probs, dtype=np.float64)

    def __getitem__(self, state):
        return float(self.probs[self.states.index(state)])

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.states, self.probs.tolist()))

    @property
    def p_new(self) -> float:
        return float(self.probs[0])

    def top(self, k=3) -> list[tuple[int, float]]:
        items = sorted(zip(self.states, self.probs.tolist()), key=lambda kv: (-kv[1], kv[0]))
        return items[:k]


def compute_likelihood(raw_scores: dict[int, float]) -> Likelihood:
    """Turn raw similarity scores per WM state into observation likelihoods.

    Mean and population standard deviation are taken over non-null scores. A
    state scores ``(s - sigma) / mu`` when ``s >= mu + sigma`` and 1 otherwise;
    ``NEW_PLACE`` scores ``mu / sigma + 1``. With no non-null score, or
    ``sigma == 0``, the affected value is 1.
    """
    nonnull = np.array([s for s in raw_scores.values() if s > 0.0], dtype=np.float64)
    scores = {NEW_PLACE: 1.0}
    if len(nonnull) == 0:
        scores.update({j: 1.0 for j in raw_scores})
        return Likelihood(scores, dict(raw_scores), 0.0, 0.0)
    mu = float(nonnull.mean())
    sigma = float(nonnull.std())
    for j, s in raw_scores.items():
        scores[j] = (s - sigma) / mu if s >= mu + sigma else 1.0
    if sigma > 0.0:
        scores[NEW_PLACE] = mu / sigma + 1.0
    return Likelihood(scores, dict(raw_scores), mu, sigma)


@functools.lru_cache(maxsize=16)
def _gaussian_table(hop_range, sigma):
    denom = 2.0 * sigma * sigma
    return tuple(math.exp(-(h * h) / denom) for h in range(hop_range + 1))


def gaussian_row(j, links_of, in_wm, hop_range=16, sigma=1.6) -> dict[int, float]:
    """Loop-closure part of the transition row from WM state ``j`` (sums to 0.9).

    Breadth-first from ``j`` over ``links_of(node)``; a node first reached at
    hop ``h`` gets ``exp(-h^2 / (2 sigma^2))`` if it is in WM. Nodes for which
    ``links_of`` returns nothing are not expanded.
    """
    g = _gaussian_table(hop_range, sigma)
    values = {j: 1.0}
    seen = {j}
    frontier = [j]
    for h in range(1, hop_range + 1):
        nxt = []
        for node in frontier:
            for nb in links_of(node):
                if nb not in seen:
                    seen.add(nb)
                    nxt.append(nb)
        if not nxt:
            break
        gh = g[h]
        for nb in nxt:
            if in_wm(nb):
                values[nb] = gh
        frontier = nxt
    total = sum(values.values())
    return {i: LOOP_MASS * v / total for i, v in values.items()}


def transition_row(from_state, wm_ids, links_of, hop_range=16, sigma=1.6) -> dict[int, float]:
    """Full transition row ``p(S_t | S_{t-1} = from_state)``."""
    if from_state == NEW_PLACE:
        n = len(wm_ids)
        # with nothing in WM the new-place state is the only one left
        row = {NEW_PLACE: P_NEW_AFTER_NEW if n else 1.0}
        row.update({i: P_LOOP_AFTER_NEW / n for i in wm_ids})
        return row
    wm = set(wm_ids)
    row = {NEW_PLACE: P_NEW_AFTER_LOOP}
    row.update(gaussian_row(from_state, links_of, wm.__contains__, hop_range, sigma))
    return row


def reconcile_states(prev: Posterior, wm_ids) -> Posterior:
    """Align a posterior with the current WM: drop gone states, add new ones at 0."""
    wm_sorted = sorted(wm_ids)
    old = dict(zip(prev.states, prev.probs.tolist()))
    if prev.states[1:] == wm_sorted:
        return prev
    probs = np.array([old.get(NEW_PLACE, 0.0)] + [old.get(i, 0.0) for i in wm_sorted])
    total = probs.sum()
    if total <= 0.0:
        probs[:] = 0.0
        probs[0] = 1.0
    else:
        probs /= total
    return Posterior([NEW_PLACE] + wm_sorted, probs)


def predict(prev: Posterior, links_of, hop_range=16, sigma=1.6) -> np.ndarray:
    """Belief vector: the transition model applied to ``prev``."""
    states = prev.states
    n = len(states) - 1
    index = {s: k for k, s in enumerate(states)}
    belief = np.zeros(n + 1)
    p0 = prev.probs[0]
    belief[0] += (P_NEW_AFTER_NEW if n else 1.0) * p0
    if n:
        belief[1:] += P_LOOP_AFTER_NEW / n * p0
    in_wm = index.__contains__
    for k in range(1, n + 1):
        pk = prev.probs[k]
        if pk == 0.0:
            continue
        belief[0] += P_NEW_AFTER_LOOP * pk
        for i, v in gaussian_row(states[k], links_of, in_wm, hop_range, sigma).items():
            belief[index[i]] += v * pk
    return belief


def update_posterior(prev: Posterior, likelihood: Likelihood, links_of, hop_range=16,
                     sigma=1.6) -> Posterior:
    """One filter step; ``prev`` must already be reconciled with WM."""
    belief = predict(prev, links_of, hop_range, sigma)
    lik = np.array([likelihood.scores.get(s, 1.0) for s in prev.states])
    post = lik * belief
    total = post.sum()
    if not total > 0.0:
        log.warning("degenerate posterior; falling back to uniform")
        post = np.full(len(post), 1.0 / len(post))
    else:
        post = post / total
    return Posterior(prev.states, post)


@dataclass
class Decision:
    hypothesis: int | None
    accepted: bool
    p_new: float

    @property
    def accepted_id(self):
        return self.hypothesis if self.accepted else None


def select_hypothesis(post: Posterior, t_loop: float) -> Decision:
    """Highest WM state (lowest id on ties), accepted when ``p(NEW) < t_loop``."""
    if len(post.states) <= 1:
        return Decision(None, False, post.p_new)
    probs = post.probs[1:]
    # states are sorted, so argmax's first-occurrence rule gives the lowest id
    k = int(np.argmax(probs))
    hyp = post.states[1 + k]
    return Decision(hyp, post.p_new < t_loop, post.p_new)
