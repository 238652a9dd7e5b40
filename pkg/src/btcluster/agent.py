"""Behaviour of a single peer: buddies, interest, requests, choking, seeding.

Numeric per-peer state (possession, slice progress, availability counts and
what each node has heard about each peer) is stored row-wise in a shared
:class:`SwarmArrays` so the engine can apply HAVE deliveries in bulk. Each
agent only ever writes its own rows; peers still learn about each other only
through delayed HAVE deliveries and link-level requests/unchokes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Hashable, Optional

import numpy as np

from .protocol import (
    BuddyStats,
    TorrentMeta,
    rechoke_leecher,
    rechoke_seed,
    upload_slots,
)

__all__ = [
    "AgentParams",
    "PeerConfig",
    "SwarmArrays",
    "Link",
    "LinkTable",
    "PeerAgent",
    "LEECHER",
    "SEED",
    "RAREST",
    "RANDOM",
]

LEECHER = "leecher"
SEED = "seed"
RAREST = "rarest"
RANDOM = "random"

REQUEST_BYTES = 17
HAVE_BYTES = 9
CHOKE_BYTES = 5


@dataclass(frozen=True)
class AgentParams:
    target_buddies: int = 40
    max_buddies: int = 80
    refill_threshold: int = 20
    list_size: int = 40
    pipeline_depth: int = 8
    rechoke_period: float = 30.0
    rate_window: float = 20.0
    optimistic_unchoke: bool = True
    reannounce_interval: float = 10.0


@dataclass(frozen=True)
class PeerConfig:
    """Static description of one peer. Rates in bytes/s, ``None`` = unlimited."""

    peer_id: int
    node: Hashable
    max_upload: Optional[float] = None
    max_download: Optional[float] = None
    slots: Optional[int] = None  # None: derived from max_upload
    piece_strategy: str = RAREST
    join_time: float = 0.0
    leave_after: Optional[float] = None  # None: seed until the end
    group: str = "leechers"

    def __post_init__(self):
        for name in ("max_upload", "max_download"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive when bounded")
        if self.slots is not None and self.slots < 1:
            raise ValueError("slots must be >= 1")
        if self.piece_strategy not in (RAREST, RANDOM):
            raise ValueError(f"unknown piece strategy {self.piece_strategy!r}")

    def upload_slots(self) -> int:
        if self.slots is not None:
            return self.slots
        return upload_slots(None if self.max_upload is None else self.max_upload / 1000.0)


class SwarmArrays:
    """Row-per-peer numeric state for a swarm of ``n_peers`` on ``n_nodes``."""

    def __init__(self, meta: TorrentMeta, node_index: np.ndarray, n_nodes: int):
        p, k = len(node_index), meta.piece_count
        self.meta = meta
        self.node_index = np.asarray(node_index, dtype=np.intp)
        self.have = np.zeros((p, k), dtype=bool)
        self.got = np.zeros((p, k), dtype=np.int32)
        self.started = np.zeros((p, k), dtype=bool)
        self.avail = np.zeros((p, k), dtype=np.int32)
        # want[i, x]: piece x not started by i, or started with unassigned slices
        self.want = np.ones((p, k), dtype=bool)
        # known[d, b]: pieces of peer b that peers on node d have heard about
        self.known = np.zeros((n_nodes, p, k), dtype=bool)
        self.slice_counts = np.array([meta.slice_count(i) for i in range(k)], dtype=np.int32)
        self.slice_len = [[meta.slice_length(i, s) for s in range(meta.slice_count(i))] for i in range(k)]


class Link:
    """Directed data channel: ``up`` uploads to ``down``.

    ``queue`` holds the slices ``down`` asked for, as
    ``[arrival_time_at_up, piece, slice, length]``; a request can only be
    served once it has arrived.
    """

    __slots__ = ("lid", "up", "down", "native", "choked", "unchoke_seen", "queue",
                 "head_done", "carry", "last_arrival", "cur_piece")

    def __init__(self, lid: int, up: int, down: int, native: bool):
        self.lid = lid
        self.up = up
        self.down = down
        self.native = native
        self.choked = True
        self.unchoke_seen = math.inf
        self.queue: deque = deque()
        self.head_done = 0
        self.carry = 0.0
        self.last_arrival = -math.inf
        self.cur_piece = -1

    def ready_bytes(self, horizon: float) -> int:
        total = 0
        for arrive, _p, _s, length in self.queue:
            if arrive >= horizon:
                break
            total += length
        return total - self.head_done


class LinkTable:
    """Allocates link ids and keeps per-second byte history for rate estimates."""

    def __init__(self, window: float, capacity: int = 1024):
        self.window = int(round(window))
        self.bytes = np.zeros(capacity)
        self.born = np.zeros(capacity)
        self.hist = np.zeros((self.window + 1, capacity))
        self.n = 0
        self.second = 0

    def new(self, up: int, down: int, native: bool, now: float) -> Link:
        if self.n == self.bytes.size:
            grow = self.bytes.size
            self.bytes = np.concatenate([self.bytes, np.zeros(grow)])
            self.born = np.concatenate([self.born, np.zeros(grow)])
            self.hist = np.concatenate([self.hist, np.zeros((self.hist.shape[0], grow))], axis=1)
        lid = self.n
        self.n += 1
        self.born[lid] = now
        return Link(lid, up, down, native)

    def record_second(self, second: int):
        self.second = second
        self.hist[second % (self.window + 1), : self.n] = self.bytes[: self.n]

    def rates(self, lids, now: float) -> np.ndarray:
        """Trailing moving-average rate (bytes/s) over the rate window."""
        lids = np.asarray(lids, dtype=np.intp)
        if lids.size == 0:
            return np.zeros(0)
        past = self.second - self.window
        if past < 0:
            base = np.zeros(lids.size)
        else:
            base = self.hist[past % (self.window + 1), lids]
        span = np.maximum(np.minimum(now - self.born[lids], now - max(past, 0)), 1.0)
        return (self.bytes[lids] - base) / span


class PeerAgent:
    def __init__(self, cfg: PeerConfig, idx: int, node_idx: int, arrays: SwarmArrays, links: LinkTable,
                 params: AgentParams, rng: np.random.Generator, initial_seed: bool = False):
        self.cfg = cfg
        self.idx = idx
        self.node_idx = node_idx
        self.arrays = arrays
        self.links = links
        self.params = params
        self.rng = rng
        self.slots = cfg.upload_slots()
        self.have = arrays.have[idx]
        self.got = arrays.got[idx]
        self.started = arrays.started[idx]
        self.avail = arrays.avail[idx]
        self.want = arrays.want[idx]
        self.role = SEED if initial_seed else LEECHER
        if initial_seed:
            self.have[:] = True
            self.got[:] = arrays.slice_counts
            self.started[:] = True
            self.want[:] = False
        self.n_have = int(self.have.sum())
        # buddy id -> (link me->buddy, link buddy->me), in connection order
        self.buddies: dict[int, tuple[Link, Link]] = {}
        self.by_node: dict[int, set[int]] = {}
        self.unchoked: set[int] = set()
        self.optimistic: Optional[int] = None
        self.open_pieces: dict[int, list[int]] = {}
        self.next_rechoke = math.inf
        self.last_announce = -math.inf
        self.joined = False
        self.active = False
        self.left = False
        self.join_time = cfg.join_time
        self.finish_time: Optional[float] = None
        self.bytes_up = 0
        self.bytes_down = 0
        self.down_native = 0
        self.down_foreign = 0

    # -- buddies -------------------------------------------------------
    @property
    def buddy_count(self) -> int:
        return len(self.buddies)

    def accepts_connection(self) -> bool:
        return self.active and len(self.buddies) < self.params.max_buddies

    def wants_refill(self, now: float) -> bool:
        p = self.params
        if now - self.last_announce < p.reannounce_interval:
            return False
        # the first announce happens on start, whatever inbound connections arrived
        return len(self.buddies) < p.refill_threshold or self.last_announce == -math.inf

    def refill_buddies(self, tracker, now: float) -> list[int]:
        """Peers to try connecting to, from a fresh tracker list."""
        self.last_announce = now
        out = []
        room = self.params.target_buddies - len(self.buddies)
        for peer in tracker.peer_list(self.idx, self.params.list_size):
            if room <= 0:
                break
            if peer != self.idx and peer not in self.buddies:
                out.append(peer)
                room -= 1
        return out

    def add_buddy(self, other: int, other_node: int, out_link: Link, in_link: Link):
        self.buddies[other] = (out_link, in_link)
        self.by_node.setdefault(other_node, set()).add(other)
        self.avail += self.arrays.known[self.node_idx, other]

    def remove_buddy(self, other: int, other_node: int):
        del self.buddies[other]
        self.by_node[other_node].discard(other)
        self.unchoked.discard(other)
        if self.optimistic == other:
            self.optimistic = None
        self.avail -= self.arrays.known[self.node_idx, other]

    # -- interest ------------------------------------------------------
    def interested_in(self, other: int) -> bool:
        if self.role == SEED:
            return False
        known = self.arrays.known[self.node_idx, other]
        return bool((known & ~self.have).any())

    def buddy_interest(self, agents) -> dict[int, bool]:
        """Which buddies are interested in what we have, as they know it."""
        known_me = self.arrays.known[:, self.idx]
        return {b: agents[b].role == LEECHER and bool((known_me[agents[b].node_idx] & ~agents[b].have).any())
                for b in self.buddies}

    # -- choking -------------------------------------------------------
    def buddy_stats(self, agents, now: float) -> list[BuddyStats]:
        ids = list(self.buddies)
        if not ids:
            return []
        out_ids = [self.buddies[b][0].lid for b in ids]
        in_ids = [self.buddies[b][1].lid for b in ids]
        from_me = self.links.rates(out_ids, now)
        to_me = self.links.rates(in_ids, now)
        interest = self.buddy_interest(agents)
        return [
            BuddyStats(b, rate_to_me=float(to_me[i]), rate_from_me=float(from_me[i]),
                       interested_in_me=interest[b], i_am_interested=self.interested_in(b))
            for i, b in enumerate(ids)
        ]

    def rechoke(self, agents, now: float) -> set[int]:
        """Periodic choke decision; returns the new unchoked buddy set."""
        self.next_rechoke = now + self.params.rechoke_period
        stats = self.buddy_stats(agents, now)
        if self.role == SEED:
            regular_slots = self.slots - 1 if self.params.optimistic_unchoke and self.slots > 1 else self.slots
            chosen = rechoke_seed(stats, regular_slots) if stats else set()
            opt = self._pick_optimistic(stats, chosen) if regular_slots < self.slots else None
            if opt is not None:
                chosen = chosen | {opt}
        else:
            opt = None
            if self.params.optimistic_unchoke and self.slots > 1:
                top = rechoke_leecher(stats, self.slots - 1) if stats else set()
                opt = self._pick_optimistic(stats, top)
            chosen = rechoke_leecher(stats, self.slots, opt) if stats else set()
        self.optimistic = opt
        return chosen

    def _pick_optimistic(self, stats, taken) -> Optional[int]:
        pool = [b.buddy_id for b in stats if b.interested_in_me and b.buddy_id not in taken]
        if not pool:
            return None
        return pool[int(self.rng.integers(len(pool)))]

    def fill_free_slots(self, interest_row: np.ndarray, agents, now: float) -> set[int]:
        """Extra buddies to unchoke when fewer than ``slots`` unchoked ones are interested."""
        busy = sum(1 for b in self.unchoked if interest_row[b])
        free = self.slots - busy
        if free <= 0:
            return set()
        cands = [b for b in self.buddies if b not in self.unchoked and interest_row[b]]
        if not cands:
            return set()
        side = 0 if self.role == SEED else 1
        rates = self.links.rates([self.buddies[b][side].lid for b in cands], now)
        order = sorted(range(len(cands)), key=lambda i: -rates[i])
        return {cands[i] for i in order[:free]}

    # -- requesting ----------------------------------------------------
    def _select_new(self, eligible: np.ndarray) -> Optional[int]:
        # Same result and rng use as rarest_first_select / random_select with
        # in_flight=started; started covers have, so one comparison suffices.
        cand = np.flatnonzero(eligible > self.started)
        if cand.size == 0:
            return None
        if self.cfg.piece_strategy == RAREST:
            counts = self.avail[cand]
            cand = cand[counts == counts.min()]
        if cand.size == 1:
            return int(cand[0])
        return int(cand[self.rng.integers(cand.size)])

    def top_up(self, link: Link, now: float, delay: float) -> int:
        """Fill the request pipeline of ``link`` (we are the downloader).

        Unassigned slices of already started pieces come first; a new piece is
        only selected when none of those is available from this buddy.
        Returns the number of slices requested.
        """
        need = self.params.pipeline_depth - len(link.queue)
        if need <= 0 or self.role == SEED:
            return 0
        eligible = self.arrays.known[self.node_idx, link.up]
        arrive = max(now + delay, link.last_arrival)
        slen = self.arrays.slice_len
        issued = 0
        while issued < need:
            piece = link.cur_piece
            if piece < 0 or not self.open_pieces.get(piece):
                piece = -1
                for p, free in self.open_pieces.items():
                    if free and eligible[p]:
                        piece = p
                        break
            if piece < 0:
                p = self._select_new(eligible)
                if p is None:
                    break
                piece = p
                self.started[p] = True
                self.open_pieces[p] = list(range(self.arrays.slice_counts[p] - 1, -1, -1))
            link.cur_piece = piece
            free = self.open_pieces[piece]
            while free and issued < need:
                s = free.pop()
                link.queue.append([arrive, piece, s, slen[piece][s]])
                issued += 1
            if not free:
                del self.open_pieces[piece]
                self.want[piece] = False
        if issued:
            link.last_arrival = arrive
        return issued

    def release(self, link: Link):
        """Requests on ``link`` are void (choke or disconnect): reopen their slices."""
        for _arr, p, s, _len in link.queue:
            self.open_pieces.setdefault(p, []).append(s)
            self.want[p] = True
        link.queue.clear()
        link.head_done = 0
        link.carry = 0.0
        link.cur_piece = -1

    def slice_received(self, piece: int, length: int, native: bool) -> bool:
        """Account one received slice; True when it completes the piece."""
        self.bytes_down += length
        if native:
            self.down_native += length
        else:
            self.down_foreign += length
        self.got[piece] += 1
        if self.got[piece] == self.arrays.slice_counts[piece]:
            self.have[piece] = True
            self.n_have += 1
            return True
        return False

    @property
    def complete(self) -> bool:
        return self.n_have == self.arrays.meta.piece_count
