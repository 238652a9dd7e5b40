import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btcluster.tracker import Tracker, TrackerError


def _swarm(sizes, seed=0):
    t = Tracker(np.random.default_rng(seed))
    pid = 0
    for node, n in enumerate(sizes):
        for _ in range(n):
            t.register(pid, node)
            pid += 1
    return t


def test_register_counts():
    t = Tracker(np.random.default_rng(0))
    t.register("a", 0)
    assert t.swarm_size() == 1
    for i in range(9):
        t.register(i, 1)
    assert t.swarm_size() == 10
    assert "a" in t and t.node_of("a") == 0


def test_duplicate_and_unknown():
    t = Tracker(np.random.default_rng(0))
    t.register(1, 0)
    with pytest.raises(TrackerError):
        t.register(1, 0)
    with pytest.raises(TrackerError):
        t.deregister(2)
    with pytest.raises(TrackerError):
        t.peer_list(2)


def test_list_sizes():
    t = _swarm([30])
    lst = t.peer_list(0)
    assert len(lst) == 29 and 0 not in lst
    big = _swarm([100, 100])
    lst = big.peer_list(5)
    assert len(lst) == 40 and len(set(lst)) == 40 and 5 not in lst


def test_deregister_removes_from_lists():
    t = _swarm([5])
    t.deregister(3)
    for _ in range(20):
        assert 3 not in t.peer_list(0)


def test_seeds_can_be_excluded():
    t = Tracker(np.random.default_rng(0), include_seeds=False)
    for i in range(5):
        t.register(i, 0)
    t.mark_seed(4)
    for _ in range(20):
        assert 4 not in t.peer_list(0)


@given(st.integers(2, 60), st.integers(0, 2 ** 32))
def test_lists_are_valid(n, seed):
    t = _swarm([n], seed)
    lst = t.peer_list(0, 40)
    assert len(lst) == min(40, n - 1)
    assert len(set(lst)) == len(lst)
    assert 0 not in lst


def test_same_seed_same_lists():
    a, b = _swarm([50, 50], 7), _swarm([50, 50], 7)
    assert [a.peer_list(i) for i in range(10)] == [b.peer_list(i) for i in range(10)]


def test_native_fraction_uniform():
    """Lists drawn uniformly: native share approaches (m-1)/(2m-1)."""
    m = 100
    t = _swarm([m, m], seed=3)
    rng = np.random.default_rng(4)
    native = total = 0
    for _ in range(10_000):
        who = int(rng.integers(2 * m))
        lst = t.peer_list(who)
        mine = t.node_of(who)
        native += sum(t.node_of(p) == mine for p in lst)
        total += len(lst)
    expected = (m - 1) / (2 * m - 1)
    assert abs(native / total - expected) <= 0.05
    # much tighter in practice: 400k samples
    assert abs(native / total - expected) <= 0.005
