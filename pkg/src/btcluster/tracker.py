"""In-simulator tracker: a registry that hands out random peer lists."""

from __future__ import annotations

from typing import Hashable, Optional

import numpy as np

__all__ = ["Tracker", "TrackerError", "DEFAULT_LIST_SIZE"]

DEFAULT_LIST_SIZE = 40


class TrackerError(KeyError):
    pass


class Tracker:
    def __init__(self, rng: Optional[np.random.Generator] = None, include_seeds: bool = True):
        self.rng = rng if rng is not None else np.random.default_rng()
        self.include_seeds = include_seeds
        self._peers: dict[Hashable, Hashable] = {}  # insertion-ordered: peer -> node
        self._seeds: set = set()

    def register(self, peer: Hashable, node: Hashable):
        if peer in self._peers:
            raise TrackerError(f"peer {peer!r} already registered")
        self._peers[peer] = node

    def deregister(self, peer: Hashable):
        if peer not in self._peers:
            raise TrackerError(f"peer {peer!r} is not registered")
        del self._peers[peer]
        self._seeds.discard(peer)

    def mark_seed(self, peer: Hashable):
        if peer in self._peers:
            self._seeds.add(peer)

    def swarm_size(self) -> int:
        return len(self._peers)

    def node_of(self, peer: Hashable) -> Hashable:
        return self._peers[peer]

    def __contains__(self, peer) -> bool:
        return peer in self._peers

    def peer_list(self, requester: Hashable, list_size: int = DEFAULT_LIST_SIZE) -> list:
        """Up to ``list_size`` other peers drawn uniformly without replacement."""
        if requester not in self._peers:
            raise TrackerError(f"unknown requester {requester!r}")
        others = [p for p in self._peers if p != requester and (self.include_seeds or p not in self._seeds)]
        k = min(list_size, len(others))
        if k == 0:
            return []
        picks = self.rng.choice(len(others), size=k, replace=False)
        return [others[i] for i in picks]
