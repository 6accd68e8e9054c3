"""Randomized kd-tree forest for approximate two-nearest-neighbour queries.

Each tree splits on a dimension drawn uniformly from the five highest-variance
dimensions of the node (estimated on at most 100 points) and cuts at the
median, down to single-point leaves. Queries descend every tree, then keep
expanding the closest unexplored branches from one shared priority queue
until ``checks`` points have been compared. ``checks = EXHAUSTIVE`` switches
to an exact depth-first search on the first tree, pruned with incremental
cell distances.

Distances are squared Euclidean, accumulated in float64. Ties between equal
distances are broken by the smaller word id, both here and in
:func:`scan_top2`, so the forest and a linear scan agree bit for bit.
"""

from __future__ import annotations

import numba
import numpy as np

EXHAUSTIVE = -1

_TOP_DIMS = 5
_VAR_SAMPLE = 100


@numba.njit(cache=True)
def _sqdist(a, b):
    acc = 0.0
    for k in range(a.shape[0]):
        d = np.float64(a[k]) - np.float64(b[k])
        acc += d * d
    return acc


@numba.njit(cache=True)
def _better(d, i, bd, bi):
    return d < bd or (d == bd and i < bi)


@numba.njit(cache=True)
def _select(perm, keys, lo, hi, k):
    """Partially order ``perm[lo:hi]`` (with its ``keys``) so position ``k`` holds its order statistic."""
    while hi - lo > 1:
        pivot = keys[(lo + hi) // 2]
        # three-way partition around the pivot value
        lt = lo
        gt = hi - 1
        i = lo
        while i <= gt:
            v = keys[i]
            if v < pivot:
                keys[lt], keys[i] = keys[i], keys[lt]
                perm[lt], perm[i] = perm[i], perm[lt]
                lt += 1
                i += 1
            elif v > pivot:
                keys[gt], keys[i] = keys[i], keys[gt]
                perm[gt], perm[i] = perm[i], perm[gt]
                gt -= 1
            else:
                i += 1
        if k < lt:
            hi = lt
        elif k > gt:
            lo = gt + 1
        else:
            return


@numba.njit(cache=True)
def _build_tree(data, seed):
    n, dim = data.shape
    cap = max(1, 2 * n)
    split_dim = np.full(cap, -1, dtype=np.int32)
    split_val = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    start = np.zeros(cap, dtype=np.int32)
    stop = np.zeros(cap, dtype=np.int32)
    perm = np.arange(n).astype(np.int32)
    if n == 0:
        return split_dim, split_val, left, right, start, stop, perm, 0

    np.random.seed(seed)
    # shuffle so the variance sample at each node is not biased by insertion order
    for i in range(n - 1, 0, -1):
        j = np.random.randint(0, i + 1)
        perm[i], perm[j] = perm[j], perm[i]

    count = 1
    start[0] = 0
    stop[0] = n
    stack = np.empty(cap, dtype=np.int32)
    sp = 0
    stack[sp] = 0
    sp += 1
    mean = np.empty(dim, dtype=np.float64)
    var = np.empty(dim, dtype=np.float64)
    keys = np.empty(n, dtype=data.dtype)
    top = min(_TOP_DIMS, dim)
    top_val = np.empty(top, dtype=np.float64)
    top_dim = np.empty(top, dtype=np.int64)
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lo = start[node]
        hi = stop[node]
        size = hi - lo
        if size <= 1:
            continue
        m = min(size, _VAR_SAMPLE)
        mean[:] = 0.0
        var[:] = 0.0
        for r in range(lo, lo + m):
            row = data[perm[r]]
            for k in range(dim):
                v = np.float64(row[k])
                mean[k] += v
                var[k] += v * v
        # keep the _TOP_DIMS largest variances (earlier dimension wins ties)
        n_top = 0
        for k in range(dim):
            mu = mean[k] / m
            v = var[k] / m - mu * mu
            if n_top == top and v <= top_val[top - 1]:
                continue
            pos = min(n_top, top - 1)
            while pos > 0 and top_val[pos - 1] < v:
                top_val[pos] = top_val[pos - 1]
                top_dim[pos] = top_dim[pos - 1]
                pos -= 1
            top_val[pos] = v
            top_dim[pos] = k
            if n_top < top:
                n_top += 1
        d_split = top_dim[np.random.randint(0, n_top)]
        half = lo + size // 2
        for r in range(lo, hi):
            keys[r] = data[perm[r], d_split]
        _select(perm, keys, lo, hi, half)
        split_dim[node] = d_split
        split_val[node] = keys[half]
        left[node] = count
        start[count] = lo
        stop[count] = half
        right[node] = count + 1
        start[count + 1] = half
        stop[count + 1] = hi
        stack[sp] = count
        stack[sp + 1] = count + 1
        sp += 2
        count += 2
    return split_dim, split_val, left, right, start, stop, perm, count


@numba.njit(cache=True)
def _heap_push(hb, ht, hn, size, b, t, nd):
    i = size
    hb[i] = b
    ht[i] = t
    hn[i] = nd
    while i > 0:
        p = (i - 1) // 2
        if hb[p] <= hb[i]:
            break
        hb[p], hb[i] = hb[i], hb[p]
        ht[p], ht[i] = ht[i], ht[p]
        hn[p], hn[i] = hn[i], hn[p]
        i = p
    return size + 1


@numba.njit(cache=True)
def _heap_pop(hb, ht, hn, size):
    b = hb[0]
    t = ht[0]
    nd = hn[0]
    size -= 1
    hb[0] = hb[size]
    ht[0] = ht[size]
    hn[0] = hn[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        s = i
        if l < size and hb[l] < hb[s]:
            s = l
        if r < size and hb[r] < hb[s]:
            s = r
        if s == i:
            break
        hb[s], hb[i] = hb[i], hb[s]
        ht[s], ht[i] = ht[i], ht[s]
        hn[s], hn[i] = hn[i], hn[s]
        i = s
    return b, t, nd, size


@numba.njit(cache=True)
def _descend(q, data, ids, sd, sv, lf, rt, st, pm, t, nd, b, hb, ht, hn, size,
             stamp, cur, best_d, best_i):
    # best_i holds row indices into data; -1 means empty
    while sd[t, nd] >= 0:
        diff = q[sd[t, nd]] - sv[t, nd]
        if diff < 0.0:
            near = lf[t, nd]
            far = rt[t, nd]
        else:
            near = rt[t, nd]
            far = lf[t, nd]
        fb = max(b, diff * diff)
        if fb <= best_d[1]:
            size = _heap_push(hb, ht, hn, size, fb, t, far)
        nd = near
    p = pm[t, st[t, nd]]
    if stamp[p] == cur:
        return size, 0
    stamp[p] = cur
    d = _sqdist(q, data[p])
    wid = ids[p]
    if best_i[0] < 0 or _better(d, wid, best_d[0], ids[best_i[0]]):
        best_d[1] = best_d[0]
        best_i[1] = best_i[0]
        best_d[0] = d
        best_i[0] = p
    elif best_i[1] < 0 or _better(d, wid, best_d[1], ids[best_i[1]]):
        best_d[1] = d
        best_i[1] = p
    return size, 1


_VISIT, _FAR, _RESTORE = 0, 1, 2


@numba.njit(cache=True)
def _query_exact(data, ids, sd, sv, lf, rt, st, pm, queries):
    # single-tree depth-first search with incremental cell distances (exact)
    nq = queries.shape[0]
    out_i = np.full((nq, 2), -1, dtype=np.int64)
    out_d = np.full((nq, 2), np.inf, dtype=np.float64)
    if data.shape[0] == 0:
        return out_i, out_d
    dim = queries.shape[1]
    off = np.zeros(dim, dtype=np.float64)
    cap = 2 * (int(np.log2(data.shape[0])) + 4) + 8
    kind = np.empty(cap, dtype=np.int8)
    node = np.empty(cap, dtype=np.int32)
    rdist = np.empty(cap, dtype=np.float64)
    kdim = np.empty(cap, dtype=np.int32)
    kval = np.empty(cap, dtype=np.float64)
    for qi in range(nq):
        q = queries[qi]
        d1 = np.inf
        d2 = np.inf
        i1 = -1
        i2 = -1
        off[:] = 0.0
        sp = 0
        kind[0] = _VISIT
        node[0] = 0
        rdist[0] = 0.0
        sp = 1
        while sp > 0:
            sp -= 1
            kd = kind[sp]
            if kd == _RESTORE:
                off[kdim[sp]] = kval[sp]
                continue
            nd = node[sp]
            rd = rdist[sp]
            if kd == _FAR:
                k = kdim[sp]
                old = off[k]
                rd = rd - old * old + kval[sp] * kval[sp]
                if rd > d2:
                    continue
                off[k] = kval[sp]
            # descend to a leaf, stacking the far sides on the way
            while sd[0, nd] >= 0:
                k = sd[0, nd]
                diff = q[k] - sv[0, nd]
                if diff < 0.0:
                    near = lf[0, nd]
                    far = rt[0, nd]
                else:
                    near = rt[0, nd]
                    far = lf[0, nd]
                kind[sp] = _RESTORE
                kdim[sp] = k
                kval[sp] = off[k]
                kind[sp + 1] = _FAR
                node[sp + 1] = far
                rdist[sp + 1] = rd
                kdim[sp + 1] = k
                kval[sp + 1] = diff
                sp += 2
                nd = near
            p = pm[0, st[0, nd]]
            d = _sqdist(q, data[p])
            wid = ids[p]
            if i1 < 0 or _better(d, wid, d1, ids[i1]):
                d2 = d1
                i2 = i1
                d1 = d
                i1 = p
            elif i2 < 0 or _better(d, wid, d2, ids[i2]):
                d2 = d
                i2 = p
        out_i[qi, 0] = i1
        out_i[qi, 1] = i2
        out_d[qi, 0] = d1
        out_d[qi, 1] = d2
    return out_i, out_d


@numba.njit(cache=True)
def _query(data, ids, sd, sv, lf, rt, st, pm, queries, checks):
    nq = queries.shape[0]
    n = data.shape[0]
    n_trees = sd.shape[0]
    out_i = np.full((nq, 2), -1, dtype=np.int64)
    out_d = np.full((nq, 2), np.inf, dtype=np.float64)
    if n == 0:
        return out_i, out_d
    heap_cap = n_trees * sd.shape[1] + 1
    hb = np.empty(heap_cap, dtype=np.float64)
    ht = np.empty(heap_cap, dtype=np.int32)
    hn = np.empty(heap_cap, dtype=np.int32)
    stamp = np.zeros(n, dtype=np.int64)
    best_d = np.empty(2, dtype=np.float64)
    best_i = np.empty(2, dtype=np.int64)
    for qi in range(nq):
        q = queries[qi]
        best_d[:] = np.inf
        best_i[:] = -1
        cur = qi + 1
        size = 0
        seen = 0
        for t in range(n_trees):
            size, c = _descend(q, data, ids, sd, sv, lf, rt, st, pm, t, 0, 0.0,
                               hb, ht, hn, size, stamp, cur, best_d, best_i)
            seen += c
        while size > 0:
            if checks >= 0 and seen >= checks:
                break
            b, t, nd, size = _heap_pop(hb, ht, hn, size)
            if b > best_d[1]:
                break
            size, c = _descend(q, data, ids, sd, sv, lf, rt, st, pm, t, nd, b,
                               hb, ht, hn, size, stamp, cur, best_d, best_i)
            seen += c
        out_i[qi, 0] = best_i[0]
        out_i[qi, 1] = best_i[1]
        out_d[qi, 0] = best_d[0]
        out_d[qi, 1] = best_d[1]
    return out_i, out_d


@numba.njit(cache=True)
def scan_top2(query, data, ids, count):
    """Exact two nearest rows among ``data[:count]``: (id1, d1, id2, d2), squared distances."""
    d1 = np.inf
    d2 = np.inf
    i1 = -1
    i2 = -1
    for r in range(count):
        d = _sqdist(query, data[r])
        wid = ids[r]
        if i1 < 0 or _better(d, wid, d1, i1):
            d2 = d1
            i2 = i1
            d1 = d
            i1 = wid
        elif i2 < 0 or _better(d, wid, d2, i2):
            d2 = d
            i2 = wid
    return i1, d1, i2, d2


class KdForest:
    """A forest of randomized kd-trees over a fixed set of word descriptors.

    Args:
        data: (n, D) float32 descriptors.
        ids: (n,) int64 word ids aligned with ``data``.
        n_trees: number of trees.
        checks: maximum number of points compared per query, or
            :data:`EXHAUSTIVE`.
        seed: base seed; tree ``t`` uses ``seed + t``.
    """

    def __init__(self, data, ids, n_trees=4, checks=64, seed=0):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.ids = np.ascontiguousarray(ids, dtype=np.int64)
        if self.data.ndim != 2 or self.data.shape[0] != self.ids.shape[0]:
            raise ValueError("data must be (n, D) and aligned with ids")
        if n_trees < 1:
            raise ValueError("n_trees must be positive")
        self.n_trees = n_trees
        self.checks = checks
        n = self.data.shape[0]
        cap = max(1, 2 * n)
        self._split_dim = np.full((n_trees, cap), -1, dtype=np.int32)
        self._split_val = np.zeros((n_trees, cap), dtype=np.float64)
        self._left = np.full((n_trees, cap), -1, dtype=np.int32)
        self._right = np.full((n_trees, cap), -1, dtype=np.int32)
        self._start = np.zeros((n_trees, cap), dtype=np.int32)
        self._perm = np.zeros((n_trees, max(1, n)), dtype=np.int32)
        for t in range(n_trees):
            sd, sv, lf, rt, st, _, perm, _ = _build_tree(self.data, (seed + t) & 0x7FFFFFFF)
            self._split_dim[t] = sd
            self._split_val[t] = sv
            self._left[t] = lf
            self._right[t] = rt
            self._start[t] = st
            if n:
                self._perm[t] = perm

    def __len__(self):
        return self.data.shape[0]

    def query(self, queries):
        """Two nearest words for each query row.

        Returns:
            ``(word_ids, sq_dists)``, both shaped (m, 2). Missing neighbours
            have id -1 and distance ``inf``.
        """
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
        if len(self) and q.shape[1] != self.data.shape[1]:
            raise ValueError(f"query dimension {q.shape[1]} != {self.data.shape[1]}")
        args = (self.data, self.ids, self._split_dim, self._split_val, self._left,
                self._right, self._start, self._perm, q)
        if self.checks == EXHAUSTIVE:
            idx, dist = _query_exact(*args)
        else:
            idx, dist = _query(*args, self.checks)
        if not len(self):
            return idx, dist
        word_ids = np.where(idx >= 0, self.ids[np.maximum(idx, 0)], -1)
        return word_ids, dist
