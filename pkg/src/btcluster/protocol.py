"""BitTorrent protocol primitives: piece geometry, upload slots, piece and
peer selection.

Everything here is a pure function of its arguments (plus an explicit
``numpy.random.Generator`` where ties are broken at random), so the same
inputs and seed always give the same answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "KiB",
    "MiB",
    "TorrentMeta",
    "BuddyStats",
    "piece_layout_v4",
    "piece_layout_v5",
    "upload_slots",
    "rarest_first_select",
    "random_select",
    "rechoke_leecher",
    "rechoke_seed",
]

KiB = 1024
MiB = 1024 * KiB

V4_MIN_PIECE = 256 * KiB
V4_MAX_PIECE = 1 * MiB
V5_MAX_PIECES = 4096


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class TorrentMeta:
    """Piece/slice geometry of the distributed file (sizes in bytes)."""

    file_size: int
    piece_size: int
    slice_size: int
    piece_count: int
    slices_per_piece: int

    def __post_init__(self):
        if self.file_size <= 0:
            raise ValueError("file_size must be positive")
        if not _is_pow2(self.piece_size):
            raise ValueError(f"piece_size {self.piece_size} is not a power of two")
        if not 0 < self.slice_size <= self.piece_size:
            raise ValueError("slice_size must be in (0, piece_size]")
        if self.piece_count != -(-self.file_size // self.piece_size):
            raise ValueError("piece_count inconsistent with file_size/piece_size")
        if self.slices_per_piece != -(-self.piece_size // self.slice_size):
            raise ValueError("slices_per_piece inconsistent with piece_size/slice_size")

    @classmethod
    def from_sizes(cls, file_size: int, piece_size: int, slice_size: int) -> "TorrentMeta":
        return cls(
            file_size=file_size,
            piece_size=piece_size,
            slice_size=slice_size,
            piece_count=-(-file_size // piece_size),
            slices_per_piece=-(-piece_size // slice_size),
        )

    def piece_length(self, piece: int) -> int:
        if piece == self.piece_count - 1:
            return self.file_size - piece * self.piece_size
        return self.piece_size

    def slice_count(self, piece: int) -> int:
        return -(-self.piece_length(piece) // self.slice_size)

    def slice_length(self, piece: int, index: int) -> int:
        return min(self.slice_size, self.piece_length(piece) - index * self.slice_size)


def piece_layout_v5(file_size: int, slice_size: int) -> TorrentMeta:
    """Smallest power-of-two piece size keeping the torrent at <= 4096 pieces.

    The piece is never smaller than one slice.
    """
    if file_size <= 0:
        raise ValueError("file_size must be positive")
    if not _is_pow2(slice_size):
        raise ValueError(f"slice_size {slice_size} is not a power of two")
    piece = slice_size
    while -(-file_size // piece) > V5_MAX_PIECES:
        piece *= 2
    return TorrentMeta.from_sizes(file_size, piece, slice_size)


def piece_layout_v4(file_size: int, slice_size: int, piece_size: Optional[int] = None) -> TorrentMeta:
    """Version-4 style layout: piece size is a power of two in [256 KiB, 1 MiB].

    Without an explicit ``piece_size`` the smallest allowed size that keeps the
    piece count at or below 4096 is used (1 MiB for files too large for that).
    """
    if file_size <= 0:
        raise ValueError("file_size must be positive")
    if not _is_pow2(slice_size):
        raise ValueError(f"slice_size {slice_size} is not a power of two")
    if piece_size is None:
        piece_size = V4_MIN_PIECE
        while piece_size < V4_MAX_PIECE and -(-file_size // piece_size) > V5_MAX_PIECES:
            piece_size *= 2
    if not _is_pow2(piece_size) or not V4_MIN_PIECE <= piece_size <= V4_MAX_PIECE:
        raise ValueError(f"piece_size {piece_size} outside the power-of-two range [256 KiB, 1 MiB]")
    if slice_size > piece_size:
        raise ValueError("slice_size larger than piece_size")
    return TorrentMeta.from_sizes(file_size, piece_size, slice_size)


def upload_slots(max_upload_rate: Optional[float]) -> int:
    """Number of concurrent uploads derived from the max upload rate in KB/s.

    ``None`` or a non-positive rate means unlimited. The square-root branch is
    truncated toward zero; it is evaluated exactly (``rate * 3/5`` as a
    fraction) so float representation of 0.6 cannot shift a perfect square.
    """
    rate = max_upload_rate
    if rate is None or rate <= 0:
        return 7
    if rate < 9:
        return 2
    if rate < 15:
        return 3
    if rate < 42:
        return 4
    return math.isqrt(math.floor(Fraction(rate) * 3 / 5))


def _mask(ids, n: int) -> np.ndarray:
    if ids is None:
        return np.zeros(n, dtype=bool)
    if isinstance(ids, np.ndarray) and ids.dtype == bool:
        return ids
    m = np.zeros(n, dtype=bool)
    idx = list(ids)
    if idx:
        m[idx] = True
    return m


def _candidates(local, eligible_from_buddy, in_flight) -> np.ndarray:
    local = np.asarray(local, dtype=bool)
    eligible = np.asarray(eligible_from_buddy, dtype=bool)
    if local.shape != eligible.shape:
        raise ValueError("bitfields sized to different piece counts")
    return eligible & ~local & ~_mask(in_flight, local.size)


def rarest_first_select(local, avail, eligible_from_buddy, in_flight, rng: np.random.Generator) -> Optional[int]:
    """Piece the buddy has and we lack, with minimal known availability.

    Ties among equally rare pieces are broken uniformly at random.
    """
    cand = np.flatnonzero(_candidates(local, eligible_from_buddy, in_flight))
    if cand.size == 0:
        return None
    counts = np.asarray(avail)[cand]
    rarest = cand[counts == counts.min()]
    if rarest.size == 1:
        return int(rarest[0])
    return int(rarest[rng.integers(rarest.size)])


def random_select(local, eligible_from_buddy, in_flight, rng: np.random.Generator) -> Optional[int]:
    cand = np.flatnonzero(_candidates(local, eligible_from_buddy, in_flight))
    if cand.size == 0:
        return None
    if cand.size == 1:
        return int(cand[0])
    return int(cand[rng.integers(cand.size)])


@dataclass
class BuddyStats:
    """Per-buddy view used by the choker. Rates are bytes/s."""

    buddy_id: int
    rate_to_me: float = 0.0
    rate_from_me: float = 0.0
    interested_in_me: bool = False
    i_am_interested: bool = False

    def __post_init__(self):
        if self.rate_to_me < 0 or self.rate_from_me < 0:
            raise ValueError("rates must be non-negative")


def _top_interested(buddies: Iterable[BuddyStats], n: int, key, exclude=()) -> list[int]:
    # sorted() is stable: equal rates keep the caller's buddy order
    pool = [b for b in buddies if b.interested_in_me and b.buddy_id not in exclude]
    pool = sorted(pool, key=lambda b: -key(b))
    return [b.buddy_id for b in pool[: max(n, 0)]]


def rechoke_leecher(buddies: Sequence[BuddyStats], slots: int, optimistic_pick: Optional[int] = None) -> set[int]:
    """Tit-for-tat: unchoke the interested buddies that upload to us fastest.

    One slot is reserved for ``optimistic_pick`` when it is given.
    """
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if optimistic_pick is None:
        return set(_top_interested(buddies, slots, lambda b: b.rate_to_me))
    regular = _top_interested(buddies, slots - 1, lambda b: b.rate_to_me, exclude=(optimistic_pick,))
    return set(regular) | {optimistic_pick}


def rechoke_seed(buddies: Sequence[BuddyStats], slots: int) -> set[int]:
    """Seeds favour the interested buddies that download from them fastest."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    return set(_top_interested(buddies, slots, lambda b: b.rate_from_me))
