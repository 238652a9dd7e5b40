import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btcluster.protocol import (
    KiB,
    MiB,
    BuddyStats,
    TorrentMeta,
    piece_layout_v4,
    piece_layout_v5,
    random_select,
    rarest_first_select,
    rechoke_leecher,
    rechoke_seed,
    upload_slots,
)


# -- piece geometry ----------------------------------------------------------
def _v5_oracle(file_size, slice_size):
    """Brute force over powers of two."""
    for e in range(0, 64):
        p = 2 ** e
        if p >= slice_size and math.ceil(file_size / p) <= 4096:
            return p


def test_v5_single_piece():
    meta = piece_layout_v5(16 * KiB, 16 * KiB)
    assert meta.piece_count == 1
    assert meta.slices_per_piece == 1


def test_v5_two_gib():
    meta = piece_layout_v5(2 * 1024 * MiB, 64 * KiB)
    assert (meta.piece_size, meta.piece_count) == (512 * KiB, 4096)
    assert meta.piece_size == _v5_oracle(2 ** 31, 64 * KiB)


def test_v5_256_mib():
    meta = piece_layout_v5(256 * MiB, 64 * KiB)
    assert (meta.piece_size, meta.piece_count) == (64 * KiB, 4096)


@given(st.integers(1, 2 ** 36), st.sampled_from([4 * KiB, 16 * KiB, 64 * KiB]))
def test_v5_matches_oracle(size, slice_size):
    meta = piece_layout_v5(size, slice_size)
    assert meta.piece_size == _v5_oracle(size, slice_size)
    assert meta.piece_count <= 4096
    assert meta.piece_count == math.ceil(size / meta.piece_size)
    assert meta.slices_per_piece == math.ceil(meta.piece_size / slice_size)


def test_v5_rejects_odd_slice():
    with pytest.raises(ValueError):
        piece_layout_v5(MiB, 3000)


def test_v4_range_and_explicit():
    assert piece_layout_v4(256 * 10 ** 6, 64 * KiB).piece_size == 256 * KiB
    assert piece_layout_v4(2 * 10 ** 9, 64 * KiB).piece_size == 512 * KiB
    assert piece_layout_v4(8 * 10 ** 9, 64 * KiB).piece_size == MiB
    assert piece_layout_v4(256 * 10 ** 6, 64 * KiB, 512 * KiB).piece_count == 489
    for bad in (128 * KiB, 2 * MiB, 300 * KiB):
        with pytest.raises(ValueError):
            piece_layout_v4(10 ** 6, 64 * KiB, bad)


@given(st.integers(1, 10 ** 10))
def test_slice_lengths_sum_to_file(size):
    meta = piece_layout_v4(size, 64 * KiB)
    last = meta.piece_count - 1
    total = (last * meta.piece_size) + meta.piece_length(last)
    assert total == size
    assert sum(meta.slice_length(last, s) for s in range(meta.slice_count(last))) == meta.piece_length(last)


def test_meta_invariants():
    with pytest.raises(ValueError):
        TorrentMeta(1000, 300, 100, 4, 3)
    with pytest.raises(ValueError):
        TorrentMeta.from_sizes(1000, 256, 512)


# -- upload slots ------------------------------------------------------------
@pytest.mark.parametrize("rate,slots", [
    (None, 7), (0, 7), (-1, 7),
    (1, 2), (8.99, 2),
    (9, 3), (10, 3), (14.9, 3),
    (15, 4), (41, 4),
    (42, 5), (5000, 54),
])
def test_upload_slots_branches(rate, slots):
    assert upload_slots(rate) == slots


@given(st.integers(42, 10 ** 7))
def test_upload_slots_sqrt_branch(rate):
    s = upload_slots(rate)
    # integer oracle: largest s with s*s <= rate*3/5
    assert s * s * 5 <= rate * 3 < (s + 1) * (s + 1) * 5
    assert upload_slots(rate + 1) >= s


# -- piece selection ---------------------------------------------------------
def _mask(n, ids):
    m = np.zeros(n, dtype=bool)
    m[list(ids)] = True
    return m


def test_rarest_unique_minimum():
    rng = np.random.default_rng(0)
    avail = np.array([3, 1, 2])
    got = rarest_first_select(np.zeros(3, bool), avail, np.ones(3, bool), set(), rng)
    assert got == 1


def test_rarest_nothing_to_request():
    rng = np.random.default_rng(0)
    assert rarest_first_select(np.ones(3, bool), np.zeros(3), np.ones(3, bool), set(), rng) is None


def test_rarest_tie_is_seeded():
    avail = np.array([1, 1])
    picks = [rarest_first_select(np.zeros(2, bool), avail, np.ones(2, bool), set(), np.random.default_rng(9))
             for _ in range(2)]
    assert picks[0] == picks[1]


@settings(max_examples=200)
@given(st.data())
def test_rarest_matches_bruteforce(data):
    n = data.draw(st.integers(1, 12))
    local = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    buddy = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    avail = np.array(data.draw(st.lists(st.integers(0, 5), min_size=n, max_size=n)))
    flight = set(data.draw(st.sets(st.integers(0, n - 1))))
    cands = [i for i in range(n) if buddy[i] and not local[i] and i not in flight]
    seeds = range(20)
    got = {rarest_first_select(local, avail, buddy, flight, np.random.default_rng(s)) for s in seeds}
    if not cands:
        assert got == {None}
        return
    lo = min(avail[i] for i in cands)
    rarest = {i for i in cands if avail[i] == lo}
    assert got <= rarest
    if len(rarest) == 1:
        assert got == rarest


def test_in_flight_accepts_mask():
    rng = np.random.default_rng(0)
    got = rarest_first_select(np.zeros(3, bool), np.array([1, 2, 3]), np.ones(3, bool), _mask(3, [0]), rng)
    assert got == 1


def test_random_select_cases():
    rng = np.random.default_rng(0)
    assert random_select(np.zeros(4, bool), _mask(4, [2]), set(), rng) == 2
    assert random_select(np.ones(4, bool), np.ones(4, bool), set(), rng) is None


def test_random_select_uniform():
    rng = np.random.default_rng(1234)
    counts = np.zeros(4, dtype=int)
    local = np.zeros(4, bool)
    every = np.ones(4, bool)
    for _ in range(10_000):
        counts[random_select(local, every, set(), rng)] += 1
    # binomial sd is about 43, so 150 is ~3.5 sd
    assert np.all(np.abs(counts - 2500) <= 150), counts


def test_bitfield_size_mismatch():
    with pytest.raises(ValueError):
        rarest_first_select(np.zeros(3, bool), np.zeros(3), np.ones(4, bool), set(), np.random.default_rng())


# -- choking -----------------------------------------------------------------
def _buddies(rates, interested=None, key="rate_to_me"):
    out = []
    for name, r in rates.items():
        kw = {key: r}
        out.append(BuddyStats(name, interested_in_me=True if interested is None else name in interested, **kw))
    return out


def test_rechoke_leecher_top2():
    assert rechoke_leecher(_buddies({"A": 5, "B": 1, "C": 3}), 2) == {"A", "C"}


def test_rechoke_leecher_single_interested():
    assert rechoke_leecher(_buddies({"A": 5, "B": 1, "C": 3}, {"B"}), 3) == {"B"}


def test_rechoke_leecher_optimistic():
    assert rechoke_leecher(_buddies({"A": 5, "B": 1, "C": 3}), 2, optimistic_pick="B") == {"A", "B"}


def test_rechoke_stable_ties():
    bs = _buddies({"X": 1, "Y": 1, "Z": 1})
    assert rechoke_leecher(bs, 2) == {"X", "Y"}
    assert rechoke_leecher(bs[::-1], 2) == {"Z", "Y"}


def test_rechoke_seed_cases():
    assert rechoke_seed(_buddies({"A": 2, "B": 9}, key="rate_from_me"), 1) == {"B"}
    assert rechoke_seed(_buddies({"A": 2, "B": 9}, set(), key="rate_from_me"), 3) == set()
    five = _buddies({i: i for i in range(5)}, key="rate_from_me")
    assert rechoke_seed(five, 7) == set(range(5))


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=1, max_size=12), st.integers(1, 8),
       st.data())
def test_rechoke_cardinality_and_iia(spec, slots, data):
    bs = [BuddyStats(i, rate_to_me=r, interested_in_me=x) for i, (r, x) in enumerate(spec)]
    chosen = rechoke_leecher(bs, slots)
    assert len(chosen) <= slots
    assert all(bs[i].interested_in_me for i in chosen)
    dropped = [b for b in bs if b.buddy_id not in chosen]
    if dropped:
        victim = data.draw(st.sampled_from(dropped))
        rest = [b for b in bs if b is not victim]
        assert rechoke_leecher(rest, slots) == chosen


def test_buddy_stats_rejects_negative():
    with pytest.raises(ValueError):
        BuddyStats(1, rate_to_me=-1)
    with pytest.raises(ValueError):
        rechoke_seed([], 0)
