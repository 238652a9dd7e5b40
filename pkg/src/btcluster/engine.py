"""Fixed-tick fluid simulation of a BitTorrent swarm spread over cluster nodes.

Per tick the loop

1. delivers HAVE messages whose (congestion-dependent) delay has elapsed,
2. lets every peer join/leave, refill buddies, rechoke and top up requests,
3. turns links with arrived requests into flows,
4. shares bandwidth max-min fairly,
5. moves bytes, completing slices, pieces and downloads,
6. once per simulated second takes snapshots and refreshes interest.

Everything random draws from generators spawned off one seed, so a run is
reproducible bit for bit.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional

import numpy as np

from .agent import (
    CHOKE_BYTES,
    HAVE_BYTES,
    LEECHER,
    REQUEST_BYTES,
    SEED,
    AgentParams,
    Link,
    LinkTable,
    PeerAgent,
    PeerConfig,
    SwarmArrays,
)
from .metrics import MetricsSink, Snapshot, native_traffic_share, native_upload_fraction
from .netfluid import LinkState, NodeSpec, progressive_fill, resource_usage
from .protocol import TorrentMeta
from .tracker import Tracker

__all__ = [
    "SimConfig",
    "SimSummary",
    "PeerRecord",
    "Simulation",
    "SimulationError",
    "ConfigError",
    "run",
    "average_download_rate",
    "aggregated_bandwidth",
]


class SimulationError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    nodes: list[NodeSpec]
    torrent: TorrentMeta
    peers: list[PeerConfig]
    seed: PeerConfig
    tick: float = 0.1
    duration: Optional[float] = None  # None: until every leecher has finished
    rng_seed: int = 0
    snapshot_s: float = 1.0
    params: AgentParams = field(default_factory=AgentParams)
    base_latency: float = 1e-3
    control_floor: float = 0.01
    max_ticks: int = 200_000
    include_seeds_in_lists: bool = True

    def validate(self):
        if not self.tick > 0:
            raise ConfigError("tick must be positive")
        if self.duration is not None and not self.duration > 0:
            raise ConfigError("duration must be positive")
        ratio = self.snapshot_s / self.tick
        if self.snapshot_s <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("snapshot period must be a positive multiple of the tick")
        node_ids = [n.node_id for n in self.nodes]
        if len(set(node_ids)) != len(node_ids):
            raise ConfigError("duplicate node ids")
        ids = [p.peer_id for p in self.peers] + [self.seed.peer_id]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate peer ids")
        for p in [self.seed, *self.peers]:
            if p.node not in node_ids:
                raise ConfigError(f"peer {p.peer_id} placed on unknown node {p.node!r}")
        if self.seed.max_upload is None:
            raise ConfigError("the original seed must have a bounded upload rate")
        if not 0 < self.control_floor <= 1:
            raise ConfigError("control_floor must be in (0, 1]")


@dataclass
class PeerRecord:
    peer_id: int
    group: str
    node: Hashable
    join_time: float
    finish_time: Optional[float]
    bytes_down: int
    bytes_up: int


@dataclass
class SimSummary:
    file_size: int
    end_time: float
    ticks: int
    leechers: list[PeerRecord]
    seed: PeerRecord
    bytes_up_total: int
    bytes_down_total: int

    @property
    def all_finished(self) -> bool:
        return all(p.finish_time is not None for p in self.leechers)

    def group(self, name: Optional[str]) -> list[PeerRecord]:
        if name is None or name == "all":
            return list(self.leechers)
        return [p for p in self.leechers if p.group == name]

    @property
    def groups(self) -> list[str]:
        return sorted({p.group for p in self.leechers})


def average_download_rate(summary: SimSummary, group: Optional[str] = None) -> float:
    """Mean over finished leechers of file_size / (finish - join), bytes/s."""
    done = [p for p in summary.group(group) if p.finish_time is not None]
    if not done:
        raise ValueError("no leecher has finished")
    return sum(summary.file_size / (p.finish_time - p.join_time) for p in done) / len(done)


def aggregated_bandwidth(summary: SimSummary, group: Optional[str] = None) -> float:
    """Average download rate times the number of peers in the group."""
    return average_download_rate(summary, group) * len(summary.group(group))


class Simulation:
    def __init__(self, config: SimConfig, sink: Optional[MetricsSink] = None,
                 on_tick: Optional[Callable[["Simulation", int], None]] = None):
        config.validate()
        self.cfg = config
        self.sink = sink if sink is not None else MetricsSink()
        self.on_tick = on_tick
        self.tick = config.tick
        self.node_ids = [n.node_id for n in config.nodes]
        node_pos = {nid: i for i, nid in enumerate(self.node_ids)}
        n_nodes = len(self.node_ids)
        cfgs = [config.seed, *config.peers]
        self.n = len(cfgs)
        self.node_index = np.array([node_pos[c.node] for c in cfgs], dtype=np.intp)
        self.arrays = SwarmArrays(config.torrent, self.node_index, n_nodes)
        self.links = LinkTable(config.params.rate_window)
        seq = np.random.SeedSequence(config.rng_seed)
        children = seq.spawn(self.n + 1)
        self.tracker = Tracker(np.random.default_rng(children[0]), config.include_seeds_in_lists)
        self.agents = [
            PeerAgent(c, i, int(self.node_index[i]), self.arrays, self.links, config.params,
                      np.random.default_rng(children[i + 1]), initial_seed=(i == 0))
            for i, c in enumerate(cfgs)
        ]
        self.pending_join = sorted(range(self.n), key=lambda i: (cfgs[i].join_time, i))
        self.active: list[PeerAgent] = []
        self.unchoked: dict[int, Link] = {}
        self._have_heap: list = []
        self._have_seq = 0
        self.unfinished = self.n - 1

        P, N = self.n, n_nodes
        self.P, self.N = P, N
        inf = math.inf
        up = [c.max_upload if c.max_upload is not None else inf for c in cfgs]
        down = [c.max_download if c.max_download is not None else inf for c in cfgs]
        self.capacity = np.array(
            up + down
            + [n.nic_upload_capacity for n in config.nodes]
            + [n.nic_download_capacity for n in config.nodes]
            + [n.loopback_capacity for n in config.nodes],
            dtype=float,
        )
        self.nic_up = [LinkState(("nic_up", n.node_id), n.nic_upload_capacity) for n in config.nodes]
        self.nic_dn = [LinkState(("nic_dn", n.node_id), n.nic_download_capacity) for n in config.nodes]
        self.loopback = [LinkState(("lo", n.node_id), n.loopback_capacity) for n in config.nodes]
        self.delays = np.zeros((N, N))
        self.ctrl_bytes = np.zeros((N, N))
        self.interest = np.zeros((P, P), dtype=bool)
        self._prev_up = np.zeros(P, dtype=np.int64)
        self._prev_down = np.zeros(P, dtype=np.int64)
        self._prev_native = np.zeros(P, dtype=np.int64)
        self._prev_foreign = np.zeros(P, dtype=np.int64)
        self.now = 0.0
        self.k = 0

    # -- control plane ---------------------------------------------------
    def _path_links(self, a: int, b: int) -> list[LinkState]:
        if a == b:
            return [self.loopback[a]]
        return [self.nic_up[a], self.nic_dn[b]]

    def _refresh_delays(self):
        base, floor = self.cfg.base_latency, self.cfg.control_floor
        for a in range(self.N):
            for b in range(self.N):
                self.delays[a, b] = base + max(l.queue_delay(HAVE_BYTES, floor) for l in self._path_links(a, b))

    def _settle_control(self, usage: np.ndarray):
        P, N = self.P, self.N
        floor = self.cfg.control_floor
        for i in range(N):
            self.nic_up[i].data_rate = usage[2 * P + i]
            self.nic_dn[i].data_rate = usage[2 * P + N + i]
            self.loopback[i].data_rate = usage[2 * P + 2 * N + i]
        for a in range(N):
            for b in range(N):
                nbytes = self.ctrl_bytes[a, b]
                if nbytes:
                    for l in self._path_links(a, b):
                        l.backlog += nbytes
        for l in (*self.nic_up, *self.nic_dn, *self.loopback):
            l.drain(self.tick, floor)
        self.ctrl_bytes[:] = 0

    def _deliver_haves(self, horizon: float):
        heap = self._have_heap
        arrays = self.arrays
        while heap and heap[0][0] < horizon:
            _t, _s, src, pieces, node = heapq.heappop(heap)
            arrays.known[node, src, pieces] = True
            bs = self.agents[src].by_node.get(node)
            if bs:
                rows = np.fromiter(sorted(bs), dtype=np.intp)
                arrays.avail[np.ix_(rows, pieces)] += 1

    def _announce(self, agent: PeerAgent, pieces: list[int], t: float):
        pieces_arr = np.asarray(pieces, dtype=np.intp)
        a = agent.node_idx
        for d in range(self.N):
            self._have_seq += 1
            heapq.heappush(self._have_heap, (t + self.delays[a, d], self._have_seq, agent.idx, pieces_arr, d))
            fan = len(agent.by_node.get(d, ()))
            self.ctrl_bytes[a, d] += HAVE_BYTES * len(pieces) * fan

    # -- membership ------------------------------------------------------
    def connect(self, a: PeerAgent, b: PeerAgent):
        native = a.node_idx == b.node_idx
        ab = self.links.new(a.idx, b.idx, native, self.now)
        ba = self.links.new(b.idx, a.idx, native, self.now)
        a.add_buddy(b.idx, b.node_idx, ab, ba)
        b.add_buddy(a.idx, a.node_idx, ba, ab)
        for x in (a, b):
            if not x.joined:
                x.joined = True
                self.sink.event(self.now, x.cfg.peer_id, "joined")

    def disconnect(self, a: PeerAgent, b: PeerAgent):
        ab, ba = a.buddies[b.idx]
        for link, downloader in ((ab, b), (ba, a)):
            downloader.release(link)
            self.unchoked.pop(link.lid, None)
            link.choked = True
            link.unchoke_seen = math.inf
        a.remove_buddy(b.idx, b.node_idx)
        b.remove_buddy(a.idx, a.node_idx)

    def _join(self, agent: PeerAgent):
        self.tracker.register(agent.idx, agent.node_idx)
        if agent.role == SEED:
            self.tracker.mark_seed(agent.idx)
            self.arrays.known[:, agent.idx, :] = True
        agent.active = True
        agent.next_rechoke = self.now + float(agent.rng.uniform(0, agent.params.rechoke_period))
        self.active.append(agent)
        self.sink.event(self.now, agent.cfg.peer_id, "started")

    def _depart(self, agent: PeerAgent):
        for b in list(agent.buddies):
            self.disconnect(agent, self.agents[b])
        self.tracker.deregister(agent.idx)
        agent.active = False
        agent.left = True
        self.active.remove(agent)
        self.sink.event(self.now, agent.cfg.peer_id, "left")

    def apply_unchoke(self, agent: PeerAgent, chosen: set[int]):
        """Choke/unchoke links so exactly ``chosen`` is unchoked by ``agent``."""
        a = agent.node_idx
        for b in sorted(agent.unchoked - chosen):
            link = agent.buddies[b][0]
            link.choked = True
            link.unchoke_seen = math.inf
            self.agents[b].release(link)
            self.unchoked.pop(link.lid, None)
            self.ctrl_bytes[a, self.node_index[b]] += CHOKE_BYTES
        for b in sorted(chosen - agent.unchoked):
            link = agent.buddies[b][0]
            link.choked = False
            d = self.node_index[b]
            link.unchoke_seen = self.now + self.delays[a, d]
            self.unchoked[link.lid] = link
            self.ctrl_bytes[a, d] += CHOKE_BYTES
        agent.unchoked = set(chosen)

    # -- per-second bookkeeping ------------------------------------------
    def _refresh_interest(self):
        have = self.arrays.have
        known = self.arrays.known
        need = (~have).astype(np.float32)
        for d in range(self.N):
            rows = np.flatnonzero(self.node_index == d)
            if rows.size:
                self.interest[rows] = (need[rows] @ known[d].T.astype(np.float32)) > 0
        for ag in self.agents:
            if ag.role == SEED:
                self.interest[ag.idx] = False

    def _per_second(self, second: int):
        self.links.record_second(second)
        self._refresh_interest()
        for ag in self.active:
            extra = ag.fill_free_slots(self.interest[:, ag.idx], self.agents, self.now)
            if extra:
                self.apply_unchoke(ag, ag.unchoked | extra)
        span = self.cfg.snapshot_s
        for ag in sorted(self.active, key=lambda x: x.idx):
            i = ag.idx
            col = self.interest[:, i]
            unchoked = tuple(
                (self.agents[b].cfg.peer_id, self.node_ids[self.node_index[b]], bool(self.node_index[b] == ag.node_idx))
                for b in sorted(ag.unchoked) if col[b]
            )
            self.sink.snapshot(Snapshot(
                time_s=self.now,
                peer_id=ag.cfg.peer_id,
                node_id=self.node_ids[ag.node_idx],
                role=ag.role,
                ul_Bps=(ag.bytes_up - self._prev_up[i]) / span,
                dl_Bps=(ag.bytes_down - self._prev_down[i]) / span,
                bytes_up=ag.bytes_up,
                bytes_down=ag.bytes_down,
                buddies=ag.buddy_count,
                unchoked=unchoked,
                dl_native_bytes=int(ag.down_native - self._prev_native[i]),
                dl_foreign_bytes=int(ag.down_foreign - self._prev_foreign[i]),
            ))
            self._prev_up[i] = ag.bytes_up
            self._prev_down[i] = ag.bytes_down
            self._prev_native[i] = ag.down_native
            self._prev_foreign[i] = ag.down_foreign

    # -- data plane ------------------------------------------------------
    def _requestable(self, horizon: float) -> list[Link]:
        """Unchoked links, already seen by their downloader, that have room in
        the pipeline and something the downloader could ask for."""
        depth = self.cfg.params.pipeline_depth
        links = [l for l in self.unchoked.values() if l.unchoke_seen < horizon and len(l.queue) < depth]
        if not links:
            return links
        n = len(links)
        up = np.fromiter((l.up for l in links), dtype=np.intp, count=n)
        dn = np.fromiter((l.down for l in links), dtype=np.intp, count=n)
        ok = (self.arrays.known[self.node_index[dn], up] & self.arrays.want[dn]).any(axis=1)
        return [l for l, keep in zip(links, ok) if keep]

    def _flows(self, horizon: float):
        flows, demand = [], []
        tick = self.tick
        for link in self.unchoked.values():
            if link.queue:
                r = link.ready_bytes(horizon)
                if r > 0:
                    flows.append(link)
                    demand.append(r / tick)
        return flows, np.asarray(demand, dtype=float)

    def _allocate(self, flows: list[Link], demand: np.ndarray):
        P, N = self.P, self.N
        F = len(flows)
        if F == 0:
            return np.zeros(0), np.zeros(self.capacity.size)
        up = np.fromiter((l.up for l in flows), dtype=np.intp, count=F)
        dn = np.fromiter((l.down for l in flows), dtype=np.intp, count=F)
        nat = np.fromiter((l.native for l in flows), dtype=bool, count=F)
        nu = self.node_index[up]
        nd = self.node_index[dn]
        ar = np.arange(F)
        flow_of = np.concatenate([ar, ar, ar, ar[~nat]])
        res_of = np.concatenate([up, P + dn, np.where(nat, 2 * P + 2 * N + nu, 2 * P + nu), 2 * P + N + nd[~nat]])
        weight = np.concatenate([np.ones(F), np.ones(F), np.where(nat, 2.0, 1.0), np.ones(int((~nat).sum()))])
        rates = progressive_fill(demand, flow_of, res_of, weight, self.capacity)
        usage = resource_usage(rates, flow_of, res_of, weight, self.capacity.size)
        return rates, usage

    def _transfer(self, flows: list[Link], rates: np.ndarray, t_end: float):
        tick = self.tick
        agents = self.agents
        link_bytes = self.links.bytes
        completed: dict[int, list[int]] = {}
        for link, r in zip(flows, rates):
            amt = r * tick + link.carry
            nbytes = int(amt)
            link.carry = amt - nbytes
            if nbytes <= 0:
                continue
            q = link.queue
            done = link.head_done + nbytes
            down = agents[link.down]
            up = agents[link.up]
            while q and done >= q[0][3]:
                _arr, p, _s, length = q.popleft()
                done -= length
                up.bytes_up += length
                link_bytes[link.lid] += length
                if down.slice_received(p, length, link.native):
                    completed.setdefault(down.idx, []).append(p)
            link.head_done = done if q else 0
        for idx in sorted(completed):
            ag = agents[idx]
            pieces = completed[idx]
            for p in pieces:
                self.sink.event(t_end, ag.cfg.peer_id, "piece-complete")
            self._announce(ag, pieces, t_end)
            if ag.complete and ag.role == LEECHER:
                ag.role = SEED
                ag.finish_time = t_end
                self.unfinished -= 1
                self.tracker.mark_seed(ag.idx)
                self.sink.event(t_end, ag.cfg.peer_id, "download-finished")

    # -- main loop -------------------------------------------------------
    def step(self):
        """Advance the simulation by one tick."""
        k = self.k
        tick = self.tick
        now = self.now = k * tick
        horizon = now + tick
        tps = int(round(self.cfg.snapshot_s / tick))
        self._refresh_delays()
        if k > 0 and k % tps == 0:
            self._per_second(k // tps)
        self._deliver_haves(horizon)

        while self.pending_join and self.agents[self.pending_join[0]].join_time <= now + 1e-9:
            self._join(self.agents[self.pending_join.pop(0)])
        for ag in list(self.active):
            leave = ag.cfg.leave_after
            if ag.finish_time is not None and leave is not None and now >= ag.finish_time + leave:
                self._depart(ag)
        for ag in list(self.active):
            if ag.wants_refill(now):
                for target in ag.refill_buddies(self.tracker, now):
                    other = self.agents[target]
                    if ag.buddy_count >= ag.params.target_buddies:
                        break
                    if other.accepts_connection() and target not in ag.buddies:
                        self.connect(ag, other)
            if now >= ag.next_rechoke:
                self.apply_unchoke(ag, ag.rechoke(self.agents, now))
        for link in self._requestable(horizon):
            down = self.agents[link.down]
            a, b = down.node_idx, self.node_index[link.up]
            n = down.top_up(link, now, self.delays[a, b])
            if n:
                self.ctrl_bytes[a, b] += REQUEST_BYTES * n

        flows, demand = self._flows(horizon)
        rates, usage = self._allocate(flows, demand)
        self._transfer(flows, rates, horizon)
        self._settle_control(usage)
        self.last_rates = (flows, rates, usage)
        if self.on_tick is not None:
            self.on_tick(self, k)
        self.k += 1
        self.now = self.k * tick

    def run(self) -> SimSummary:
        cfg = self.cfg
        limit = cfg.max_ticks
        if cfg.duration is not None:
            limit = min(limit, int(math.ceil(cfg.duration / cfg.tick - 1e-9)))
        while True:
            if self.unfinished == 0 and not self.pending_join:
                break
            if self.k >= limit:
                if cfg.duration is not None and self.k * cfg.tick >= cfg.duration - 1e-9:
                    break
                raise SimulationError(
                    f"tick budget of {cfg.max_ticks} exhausted at t={self.now:.1f}s with "
                    f"{self.unfinished} unfinished leechers"
                )
            self.step()
        return self.summary()

    def summary(self) -> SimSummary:
        def rec(ag: PeerAgent) -> PeerRecord:
            return PeerRecord(ag.cfg.peer_id, ag.cfg.group, ag.cfg.node, ag.join_time,
                              ag.finish_time, ag.bytes_down, ag.bytes_up)

        summary = SimSummary(
            file_size=self.cfg.torrent.file_size,
            end_time=self.now,
            ticks=self.k,
            leechers=[rec(a) for a in self.agents[1:]],
            seed=rec(self.agents[0]),
            bytes_up_total=sum(a.bytes_up for a in self.agents),
            bytes_down_total=sum(a.bytes_down for a in self.agents),
        )
        self.sink.summary_rows = summary_rows(summary, self.sink)
        return summary


def summary_rows(summary: SimSummary, sink: MetricsSink) -> list[dict]:
    rows = []
    for g in [*summary.groups, "all"] if summary.leechers else []:
        members = summary.group(g)
        ids = {p.peer_id for p in members}
        try:
            avg = average_download_rate(summary, g)
            agg = avg * len(members)
        except ValueError:
            avg = agg = math.nan
        try:
            conn = native_upload_fraction(sink.snapshots, role=LEECHER, peers=ids)
        except ValueError:
            conn = math.nan
        try:
            traffic = native_traffic_share(sink.snapshots, role=LEECHER, peers=ids)
        except ValueError:
            traffic = math.nan
        rows.append({"group": g, "peers": len(members), "avg_dl_Bps": avg, "agg_dl_Bps": agg,
                     "native_conn_frac": conn, "native_traffic_frac": traffic})
    return rows


def run(config: SimConfig, sink: Optional[MetricsSink] = None, **kw) -> SimSummary:
    return Simulation(config, sink, **kw).run()
