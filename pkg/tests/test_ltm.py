import struct
import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loopmem.ltm import (LOOP, NEIGHBOR, LocationRecord, LtmStore, PersistenceError,
                         decode_descriptor, decode_signature, encode_descriptor, encode_signature)


def _rec(i, words=(), weight=0, nbr=(), loop=()):
    return LocationRecord(i, weight, Counter(words), set(nbr), set(loop))


def test_signature_blob_layout():
    blob = encode_signature(Counter({5: 2, 3: 1, 10: 4}))
    assert blob[:4] == struct.pack("<I", 3)
    assert np.frombuffer(blob, "<i8", 3, 4).tolist() == [3, 2, 5]
    assert np.frombuffer(blob, "<u4", 3, 28).tolist() == [1, 2, 4]
    assert decode_signature(blob) == Counter({5: 2, 3: 1, 10: 4})
    assert decode_signature(encode_signature(Counter())) == Counter()


def test_descriptor_blob_layout():
    d = np.array([1.5, -2.0, 0.25], np.float32)
    blob = encode_descriptor(d)
    assert blob == struct.pack("<3f", 1.5, -2.0, 0.25)
    assert np.array_equal(decode_descriptor(blob), d)


@given(st.dictionaries(st.integers(0, 2**40), st.integers(1, 2**31), max_size=50))
def test_signature_round_trip(words):
    assert decode_signature(encode_signature(Counter(words))) == Counter(words)


def test_put_get_round_trip_and_counters():
    s = LtmStore()
    assert s.put_locations([]) == 0
    s.put_locations([_rec(1, [4, 4, 9], 3, nbr=[2]), _rec(2, [9], 0, nbr=[1], loop=[7])])
    s.put_words([(4, np.ones(3)), (9, np.zeros(3))])
    got = s.get_locations([1, 2, 3])
    assert got[1] == _rec(1, [4, 4, 9], 3, nbr=[2])
    assert got[2] == _rec(2, [9], 0, nbr=[1], loop=[7])
    assert got[3] is None
    assert (s.n_l, s.w_l) == (2, 2)
    assert np.array_equal(s.get_words([4])[4], np.ones(3, np.float32))


def test_links_stored_once_with_type():
    s = LtmStore()
    s.put_locations([_rec(5, nbr=[3], loop=[9]), _rec(3, nbr=[5])])
    rows = s._db.execute("SELECT from_id, to_id, link_type FROM links ORDER BY 1, 2").fetchall()
    assert rows == [(3, 5, NEIGHBOR), (5, 9, LOOP)]


def test_duplicate_ids_are_faults():
    s = LtmStore()
    s.put_locations([_rec(1)])
    with pytest.raises(PersistenceError):
        s.put_locations([_rec(1)])
    s.put_words([(1, np.zeros(2))])
    with pytest.raises(PersistenceError):
        s.put_words([(1, np.zeros(2))])
    assert (s.n_l, s.w_l) == (1, 1)


def test_large_batch_counter():
    s = LtmStore()
    s.put_locations(_rec(i, [i]) for i in range(1, 1001))
    assert s.n_l == 1000 == len(s.location_ids())


def test_durable_across_reopen(tmp_path):
    path = tmp_path / "ltm.db"
    s = LtmStore(path)
    s.put_locations([_rec(1, [2], 5, nbr=[3])])
    s.put_words([(2, np.arange(4))])
    s.put_remaps({8: 2})
    s.close()
    t = LtmStore(path)
    assert t.get_locations([1])[1] == _rec(1, [2], 5, nbr=[3])
    assert t.remaps == {8: 2} and (t.n_l, t.w_l) == (1, 1)
    t.close()
    assert LtmStore(path, fresh=True).n_l == 0


def test_lazy_remap_rewrites_record():
    s = LtmStore()
    s.put_locations([_rec(1, [7, 3])])
    s.put_remaps({7: 90})
    assert s.get_locations([1])[1].words == Counter({90: 1, 3: 1})
    blob = s._db.execute("SELECT words FROM signatures WHERE location_id = 1").fetchone()[0]
    assert decode_signature(blob) == Counter({90: 1, 3: 1})


def test_chained_remap_resolves_to_terminal():
    s = LtmStore()
    s.put_locations([_rec(1, [7])])
    s.put_remaps({7: 90})
    s.put_remaps({90: 140})
    assert s.resolve(7) == 140
    assert s.get_locations([1])[1].words == Counter({140: 1})


def test_remap_cycle_detected():
    s = LtmStore()
    s.put_remaps({1: 2, 2: 1})
    with pytest.raises(PersistenceError):
        s.resolve(1)


def test_no_remaps_is_identity():
    s = LtmStore()
    s.put_locations([_rec(1, [1, 2])])
    assert s.get_locations([1])[1].words == Counter({1: 1, 2: 1})
    assert s.shutdown_compact() == {"signatures_rewritten": 0, "words_deleted": 0}


def test_compaction_counts_and_idempotence():
    rng = np.random.default_rng(0)
    s = LtmStore()
    old = list(range(1, 101))
    new = list(range(1001, 1101))
    keep = list(range(500, 520))
    sigs = {lid: set(rng.choice(old, 8, replace=False).tolist()) | {keep[lid % 20]}
            for lid in range(1, 21)}
    s.put_locations(_rec(lid, sorted(w)) for lid, w in sigs.items())
    s.put_words((w, np.zeros(2)) for w in old + keep)
    s.put_words((w, np.ones(2)) for w in new)
    s.put_remaps(dict(zip(old, new)))
    words_before = s.w_l
    out = s.shutdown_compact()
    # every old id is remapped, so every one becomes unreferenced
    assert out == {"signatures_rewritten": 20, "words_deleted": 100}
    assert s.w_l == words_before - 100
    assert s.remaps == {} and s._db.execute("SELECT COUNT(*) FROM remaps").fetchone()[0] == 0
    assert s.shutdown_compact() == {"signatures_rewritten": 0, "words_deleted": 0}
    for lid, rec in s.get_locations(range(1, 21)).items():
        assert set(rec.words) <= set(new) | set(keep)


def test_redirect_links():
    s = LtmStore()
    s.put_locations([_rec(2, nbr=[5], loop=[9]), _rec(9, loop=[2])])
    s.redirect_links(5, 6)
    assert s.links_of(2) == ({6}, {9})
    assert s.links_of(5) == (set(), set())


def _chain_store(n):
    s = LtmStore()
    s.put_locations(_rec(i, nbr=[j for j in (i - 1, i + 1) if 1 <= j <= n]) for i in range(1, n + 1))
    return s


def test_neighborhood_chain_of_forty():
    s = _chain_store(40)
    got = s.get_neighborhood(20, max_hops=16)
    assert sorted(got) == [i for i in range(4, 37) if i != 20]
    assert got[:4] == [21, 19, 22, 18]


def test_neighborhood_unknown_or_isolated():
    s = _chain_store(3)
    s.put_locations([_rec(50)])
    assert s.get_neighborhood(99) == []
    assert s.get_neighborhood(50) == []


def test_neighborhood_time_before_space():
    s = LtmStore()
    s.put_locations([
        _rec(10, nbr=[11]), _rec(11, nbr=[10, 12], loop=[3]), _rec(12, nbr=[11, 13]),
        _rec(13, nbr=[12]), _rec(3, nbr=[4], loop=[11]), _rec(4, nbr=[3]),
    ])
    assert s.get_neighborhood(11) == [12, 10, 13, 3, 4]


def test_id_lookup_latency_grows_slowly():
    def lookup_time(n):
        s = LtmStore()
        s.put_locations(_rec(i, [i, i + 1]) for i in range(1, n + 1))
        ids = np.random.default_rng(1).integers(1, n + 1, 2000).tolist()
        best = float("inf")
        for _ in range(5):
            t = time.perf_counter()
            for i in ids:
                s._db.execute("SELECT words FROM signatures WHERE location_id = ?", (i,)).fetchone()
            best = min(best, time.perf_counter() - t)
        return best

    small, large = lookup_time(5_000), lookup_time(50_000)
    assert large <= 2.0 * small


def test_open_failure_is_persistence_error(tmp_path):
    with pytest.raises(PersistenceError):
        LtmStore(tmp_path / "missing_dir" / "x.db")


def test_write_failure_is_persistence_error():
    s = LtmStore()
    s._db.execute("DROP TABLE words")
    with pytest.raises(PersistenceError):
        s.put_words([(1, np.zeros(2))])
