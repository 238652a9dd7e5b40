"""Per-second snapshots, lifecycle events and native/foreign accounting.

A :class:`MetricsSink` collects what one simulation run produces; it is
written out as three CSV files by :func:`write_streams`.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

__all__ = [
    "Snapshot",
    "EventRecord",
    "MetricsSink",
    "SNAPSHOT_FIELDS",
    "EVENT_FIELDS",
    "SUMMARY_FIELDS",
    "EVENT_KINDS",
    "native_upload_fraction",
    "native_traffic_share",
    "write_streams",
]

SNAPSHOT_FIELDS = [
    "time_s", "peer_id", "node_id", "role", "ul_Bps", "dl_Bps", "share_ratio",
    "bytes_up", "bytes_down", "buddies", "unchoked_native", "unchoked_foreign",
]
EVENT_FIELDS = ["time_s", "peer_id", "kind"]
SUMMARY_FIELDS = ["group", "peers", "avg_dl_Bps", "agg_dl_Bps", "native_conn_frac", "native_traffic_frac"]
EVENT_KINDS = ("started", "joined", "piece-complete", "download-finished", "left")


@dataclass(slots=True)
class Snapshot:
    time_s: float
    peer_id: int
    node_id: Hashable
    role: str
    ul_Bps: float
    dl_Bps: float
    bytes_up: int
    bytes_down: int
    buddies: int
    unchoked: tuple = ()  # (buddy id, buddy node, native) per upload connection
    # bytes received during the interval, split by where they came from
    dl_native_bytes: int = 0
    dl_foreign_bytes: int = 0

    @property
    def share_ratio(self) -> float:
        return self.bytes_up / self.bytes_down if self.bytes_down > 0 else math.nan

    @property
    def unchoked_native(self) -> int:
        return sum(1 for u in self.unchoked if u[2])

    @property
    def unchoked_foreign(self) -> int:
        return len(self.unchoked) - self.unchoked_native


@dataclass(slots=True)
class EventRecord:
    time_s: float
    peer_id: int
    kind: str

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass
class MetricsSink:
    snapshots: list = field(default_factory=list)
    events: list = field(default_factory=list)
    summary_rows: list = field(default_factory=list)

    def snapshot(self, snap: Snapshot):
        self.snapshots.append(snap)

    def event(self, time_s: float, peer_id: int, kind: str):
        self.events.append(EventRecord(time_s, peer_id, kind))


def _select(snapshots: Iterable[Snapshot], node=None, window=None, role=None, peers=None):
    lo, hi = window if window is not None else (-math.inf, math.inf)
    for s in snapshots:
        if node is not None and s.node_id != node:
            continue
        if peers is not None and s.peer_id not in peers:
            continue
        if role is not None and s.role != role:
            continue
        if lo <= s.time_s <= hi:
            yield s


def native_upload_fraction(snapshots: Sequence[Snapshot], node=None, window: Optional[tuple] = None,
                           role: Optional[str] = None, peers=None) -> float:
    """Share of upload connections that go to native buddies.

    Computed per snapshot second over all selected peers, then averaged over
    the seconds that had at least one upload connection.
    """
    per_sec: dict[float, list[int]] = {}
    seen = False
    for s in _select(snapshots, node, window, role, peers):
        seen = True
        acc = per_sec.setdefault(s.time_s, [0, 0])
        acc[0] += s.unchoked_native
        acc[1] += len(s.unchoked)
    if not seen:
        raise ValueError("empty window")
    fracs = [n / t for n, t in per_sec.values() if t > 0]
    if not fracs:
        raise ValueError("no upload connections in window")
    return sum(fracs) / len(fracs)


def native_traffic_share(snapshots: Sequence[Snapshot], node=None, window: Optional[tuple] = None,
                         role: Optional[str] = None, peers=None) -> float:
    """Byte-weighted share of received data that came from native buddies."""
    native = total = 0
    seen = False
    for s in _select(snapshots, node, window, role, peers):
        seen = True
        native += s.dl_native_bytes
        total += s.dl_native_bytes + s.dl_foreign_bytes
    if not seen:
        raise ValueError("empty window")
    if total == 0:
        raise ValueError("no traffic received in window")
    return native / total


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def write_streams(sink: MetricsSink, out_dir) -> dict:
    """Write snapshots.csv, events.csv and summary.csv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, f"{name}.csv") for name in ("snapshots", "events", "summary")}
    with open(paths["snapshots"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_FIELDS)
        for s in sink.snapshots:
            w.writerow([_fmt(v) for v in (
                s.time_s, s.peer_id, s.node_id, s.role, s.ul_Bps, s.dl_Bps, s.share_ratio,
                s.bytes_up, s.bytes_down, s.buddies, s.unchoked_native, s.unchoked_foreign)])
    with open(paths["events"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_FIELDS)
        for e in sink.events:
            w.writerow([_fmt(e.time_s), e.peer_id, e.kind])
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in sink.summary_rows:
            w.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])
    return paths
