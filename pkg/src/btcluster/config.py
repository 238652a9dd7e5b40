"""Experiment configuration files.

An INI-style document with units in the key names (decimal MB = 1e6 bytes,
KiB = 1024 bytes)::

    [cluster]
    nodes = n0, n1, seednode
    loopback_MBps = 500
    nic_ul_MBps = 125
    nic_dl_MBps = 125

    [node.seednode]          ; optional per-node override
    nic_ul_MBps = 125

    [torrent]
    file_size_MB = 256
    slice_size_KiB = 64
    piece_rule = v4          ; v4 or v5
    piece_size_KiB = 512     ; optional, v4 only

    [peers.n0]               ; one section per leecher group
    count = 60
    node = n0
    ul_cap_MBps = 5
    dl_cap_MBps = unlimited
    slots = 7                ; or auto
    strategy = rarest        ; or random
    join_s = 0

    [seedpeer]
    node = seednode
    ul_cap_MBps = 5

    [sim]
    tick_s = 0.1
    rng_seed = 1
    duration = complete      ; or seconds

    [plan]
    observed_rate_MBps = 4.25

Unknown sections or keys are errors and every error carries a line number.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .agent import AgentParams, PeerConfig
from .engine import ConfigError as _EngineConfigError
from .engine import SimConfig
from .netfluid import NodeSpec
from .planner import ExperimentPlan, PlanError
from .protocol import KiB, piece_layout_v4, piece_layout_v5

__all__ = [
    "ConfigError",
    "NodeEntry",
    "TorrentSection",
    "PeerGroup",
    "SeedSection",
    "SimSection",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "MB",
]

MB = 1e6
UNLIMITED = "unlimited"


class ConfigError(_EngineConfigError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class NodeEntry:
    node_id: str
    loopback_MBps: float
    nic_ul_MBps: float
    nic_dl_MBps: float


@dataclass(frozen=True)
class TorrentSection:
    file_size_MB: float
    slice_size_KiB: int = 64
    piece_rule: str = "v4"
    piece_size_KiB: Optional[int] = None


@dataclass(frozen=True)
class PeerGroup:
    name: str
    count: int
    node: str
    ul_cap_MBps: Optional[float] = None
    dl_cap_MBps: Optional[float] = None
    slots: Optional[int] = None  # None: auto
    strategy: str = "rarest"
    join_s: float = 0.0
    leave_after_s: Optional[float] = None  # None: stay


@dataclass(frozen=True)
class SeedSection:
    node: str
    ul_cap_MBps: float
    slots: Optional[int] = None


@dataclass(frozen=True)
class SimSection:
    tick_s: float = 0.1
    rechoke_s: float = 30.0
    snapshot_s: float = 1.0
    rng_seed: int = 0
    duration: Optional[float] = None  # None: until every leecher completes
    control_floor: float = 0.01
    base_latency_s: float = 1e-3
    pipeline_depth: int = 8
    optimistic_unchoke: bool = True
    join_spread_s: float = 0.0
    max_ticks: int = 200000


@dataclass(frozen=True)
class ExperimentConfig:
    nodes: tuple
    torrent: TorrentSection
    groups: tuple
    seed: SeedSection
    sim: SimSection = field(default_factory=SimSection)
    observed_rate_MBps: Optional[float] = None

    # -- derived objects -----------------------------------------------
    def with_seed(self, rng_seed: int) -> "ExperimentConfig":
        return replace(self, sim=replace(self.sim, rng_seed=int(rng_seed)))

    def with_peers_per_group(self, count: int) -> "ExperimentConfig":
        return replace(self, groups=tuple(replace(g, count=int(count)) for g in self.groups))

    def torrent_meta(self):
        t = self.torrent
        size = int(round(t.file_size_MB * MB))
        slice_size = t.slice_size_KiB * KiB
        if t.piece_rule == "v5":
            return piece_layout_v5(size, slice_size)
        piece = None if t.piece_size_KiB is None else t.piece_size_KiB * KiB
        return piece_layout_v4(size, slice_size, piece)

    def to_sim_config(self) -> SimConfig:
        s = self.sim
        nodes = [NodeSpec(n.node_id, n.loopback_MBps * MB, n.nic_ul_MBps * MB, n.nic_dl_MBps * MB) for n in self.nodes]
        peers = []
        pid = 1
        total = sum(g.count for g in self.groups)
        for g in self.groups:
            for _ in range(g.count):
                offset = s.join_spread_s * (pid - 1) / total if total > 1 else 0.0
                peers.append(PeerConfig(
                    peer_id=pid, node=g.node,
                    max_upload=None if g.ul_cap_MBps is None else g.ul_cap_MBps * MB,
                    max_download=None if g.dl_cap_MBps is None else g.dl_cap_MBps * MB,
                    slots=g.slots, piece_strategy=g.strategy, join_time=g.join_s + offset,
                    leave_after=g.leave_after_s, group=g.name,
                ))
                pid += 1
        seed = PeerConfig(peer_id=0, node=self.seed.node, max_upload=self.seed.ul_cap_MBps * MB,
                          slots=self.seed.slots, group="seed")
        params = AgentParams(rechoke_period=s.rechoke_s, pipeline_depth=s.pipeline_depth,
                             optimistic_unchoke=s.optimistic_unchoke)
        return SimConfig(nodes=nodes, torrent=self.torrent_meta(), peers=peers, seed=seed, tick=s.tick_s,
                         duration=s.duration, rng_seed=s.rng_seed, snapshot_s=s.snapshot_s, params=params,
                         base_latency=s.base_latency_s, control_floor=s.control_floor, max_ticks=s.max_ticks)

    def to_plan(self) -> ExperimentPlan:
        """Planner input: leecher nodes only, caps assumed homogeneous."""
        order = [n.node_id for n in self.nodes]
        per_node: dict = {}
        for g in self.groups:
            if g.count:
                per_node[g.node] = per_node.get(g.node, 0) + g.count
        ups = {g.ul_cap_MBps for g in self.groups if g.count}
        downs = {g.dl_cap_MBps for g in self.groups if g.count}
        if len(ups) > 1 or len(downs) > 1:
            raise PlanError("planner assumes all leechers share the same caps")
        specs = {n.node_id: n for n in self.nodes}
        ids = [nid for nid in order if nid in per_node]
        nodes = tuple(NodeSpec(nid, specs[nid].loopback_MBps * MB, specs[nid].nic_ul_MBps * MB,
                               specs[nid].nic_dl_MBps * MB) for nid in ids)
        up, down = ups.pop(), downs.pop()
        obs = self.observed_rate_MBps
        return ExperimentPlan(
            m=tuple(per_node[nid] for nid in ids), nodes=nodes,
            upload_cap=None if up is None else up * MB,
            download_cap=None if down is None else down * MB,
            observed_rate=None if obs is None else obs * MB,
        )


# -- parsing ---------------------------------------------------------------
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")

_CLUSTER_KEYS = {"nodes", "loopback_MBps", "nic_ul_MBps", "nic_dl_MBps"}
_NODE_KEYS = {"loopback_MBps", "nic_ul_MBps", "nic_dl_MBps"}
_TORRENT_KEYS = {f.name for f in fields(TorrentSection)}
_GROUP_KEYS = {f.name for f in fields(PeerGroup)} - {"name"}
_SEED_KEYS = {f.name for f in fields(SeedSection)}
_SIM_KEYS = {f.name for f in fields(SimSection)}
_PLAN_KEYS = {"observed_rate_MBps"}


def _line_index(text: str) -> dict:
    """(section, key) -> line number, plus (section, None) for headers."""
    where = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(raw)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), n)
            continue
        m = _KEY_RE.match(raw)
        if m and section is not None and not raw[:1].isspace():
            where.setdefault((section, m.group(1).strip()), n)
    return where


class _Reader:
    def __init__(self, text: str, source: str):
        self.source = source
        self.lines = _line_index(text)
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), source) from None
        self.cp = cp

    def err(self, msg: str, section: str, key: Optional[str] = None):
        line = self.lines.get((section, key), self.lines.get((section, None)))
        return ConfigError(msg, line, self.source)

    def check_keys(self, section: str, allowed: set):
        for key in self.cp[section]:
            if key not in allowed:
                raise self.err(f"unknown key {key!r} in [{section}]", section, key)

    def raw(self, section: str, key: str, default=None, required=False):
        sec = self.cp[section]
        if key not in sec:
            if required:
                raise self.err(f"missing key {key!r} in [{section}]", section)
            return default
        return sec[key].strip()

    def number(self, section, key, default=None, required=False, kind=float, positive=True,
               allow_unlimited=False, allow_zero=False):
        v = self.raw(section, key, default, required)
        if v is None or not isinstance(v, str):
            return v
        if allow_unlimited and v.lower() in (UNLIMITED, "none", "inf"):
            return None
        try:
            x = kind(v)
        except ValueError:
            raise self.err(f"{key} = {v!r} is not a valid {kind.__name__}", section, key) from None
        if kind is float and not math.isfinite(x):
            raise self.err(f"{key} must be finite", section, key)
        if positive and not (x > 0 or (allow_zero and x == 0)):
            raise self.err(f"{key} must be {'non-negative' if allow_zero else 'positive'}", section, key)
        return x


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    r = _Reader(text, source)
    cp = r.cp
    known = {"cluster", "torrent", "seedpeer", "sim", "plan"}
    for sec in cp.sections():
        if sec in known or sec.startswith("node.") or sec.startswith("peers."):
            continue
        raise r.err(f"unknown section [{sec}]", sec)
    for sec in ("cluster", "torrent", "seedpeer"):
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]", None, source)

    r.check_keys("cluster", _CLUSTER_KEYS)
    node_ids = [x.strip() for x in r.raw("cluster", "nodes", required=True).split(",") if x.strip()]
    if not node_ids:
        raise r.err("cluster needs at least one node", "cluster", "nodes")
    if len(set(node_ids)) != len(node_ids):
        raise r.err("duplicate node ids", "cluster", "nodes")
    defaults = {k: r.number("cluster", k) for k in _NODE_KEYS}
    nodes = []
    for nid in node_ids:
        sec = f"node.{nid}"
        vals = dict(defaults)
        if cp.has_section(sec):
            r.check_keys(sec, _NODE_KEYS)
            for k in _NODE_KEYS:
                v = r.number(sec, k)
                if v is not None:
                    vals[k] = v
        for k, v in vals.items():
            if v is None:
                raise r.err(f"node {nid!r} has no {k}", "cluster")
        nodes.append(NodeEntry(nid, vals["loopback_MBps"], vals["nic_ul_MBps"], vals["nic_dl_MBps"]))
    for sec in cp.sections():
        if sec.startswith("node.") and sec[5:] not in node_ids:
            raise r.err(f"[{sec}] names a node that is not in [cluster] nodes", sec)

    r.check_keys("torrent", _TORRENT_KEYS)
    rule = r.raw("torrent", "piece_rule", "v4").lower()
    if rule not in ("v4", "v5"):
        raise r.err(f"piece_rule must be v4 or v5, not {rule!r}", "torrent", "piece_rule")
    piece = r.number("torrent", "piece_size_KiB", kind=int)
    if piece is not None and rule != "v4":
        raise r.err("piece_size_KiB only applies to piece_rule = v4", "torrent", "piece_size_KiB")
    torrent = TorrentSection(
        file_size_MB=r.number("torrent", "file_size_MB", required=True),
        slice_size_KiB=r.number("torrent", "slice_size_KiB", 64, kind=int),
        piece_rule=rule,
        piece_size_KiB=piece,
    )

    groups = []
    for sec in cp.sections():
        if not sec.startswith("peers."):
            continue
        r.check_keys(sec, _GROUP_KEYS)
        node = r.raw(sec, "node", required=True)
        if node not in node_ids:
            raise r.err(f"unknown node {node!r}", sec, "node")
        slots_raw = r.raw(sec, "slots", "auto")
        slots = None if slots_raw.lower() == "auto" else r.number(sec, "slots", kind=int)
        strategy = r.raw(sec, "strategy", "rarest").lower()
        if strategy not in ("rarest", "random"):
            raise r.err(f"strategy must be rarest or random, not {strategy!r}", sec, "strategy")
        leave = r.raw(sec, "leave_after_s", "stay")
        groups.append(PeerGroup(
            name=sec[len("peers."):],
            count=r.number(sec, "count", required=True, kind=int, allow_zero=True),
            node=node,
            ul_cap_MBps=r.number(sec, "ul_cap_MBps", allow_unlimited=True),
            dl_cap_MBps=r.number(sec, "dl_cap_MBps", allow_unlimited=True),
            slots=slots,
            strategy=strategy,
            join_s=r.number(sec, "join_s", 0.0, allow_zero=True),
            leave_after_s=None if leave.lower() == "stay" else r.number(sec, "leave_after_s", allow_zero=True),
        ))

    r.check_keys("seedpeer", _SEED_KEYS)
    seed_node = r.raw("seedpeer", "node", required=True)
    if seed_node not in node_ids:
        raise r.err(f"unknown node {seed_node!r}", "seedpeer", "node")
    seed_slots = r.raw("seedpeer", "slots", "auto")
    seed = SeedSection(
        node=seed_node,
        ul_cap_MBps=r.number("seedpeer", "ul_cap_MBps", required=True),
        slots=None if seed_slots.lower() == "auto" else r.number("seedpeer", "slots", kind=int),
    )

    sim = SimSection()
    if cp.has_section("sim"):
        r.check_keys("sim", _SIM_KEYS)
        dur = r.raw("sim", "duration", "complete")
        opt = r.raw("sim", "optimistic_unchoke", "true").lower()
        if opt not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
            raise r.err("optimistic_unchoke must be a boolean", "sim", "optimistic_unchoke")
        sim = SimSection(
            tick_s=r.number("sim", "tick_s", sim.tick_s),
            rechoke_s=r.number("sim", "rechoke_s", sim.rechoke_s),
            snapshot_s=r.number("sim", "snapshot_s", sim.snapshot_s),
            rng_seed=r.number("sim", "rng_seed", sim.rng_seed, kind=int, allow_zero=True),
            duration=None if dur.lower() == "complete" else r.number("sim", "duration"),
            control_floor=r.number("sim", "control_floor", sim.control_floor),
            base_latency_s=r.number("sim", "base_latency_s", sim.base_latency_s, allow_zero=True),
            pipeline_depth=r.number("sim", "pipeline_depth", sim.pipeline_depth, kind=int),
            optimistic_unchoke=opt in ("true", "yes", "on", "1"),
            join_spread_s=r.number("sim", "join_spread_s", sim.join_spread_s, allow_zero=True),
            max_ticks=r.number("sim", "max_ticks", sim.max_ticks, kind=int),
        )
        if sim.control_floor > 1:
            raise r.err("control_floor is a fraction of capacity (<= 1)", "sim", "control_floor")
        if sim.rng_seed < 0 or sim.rng_seed >= 2 ** 64:
            raise r.err("rng_seed must fit in an unsigned 64-bit integer", "sim", "rng_seed")

    observed = None
    if cp.has_section("plan"):
        r.check_keys("plan", _PLAN_KEYS)
        observed = r.number("plan", "observed_rate_MBps")

    cfg = ExperimentConfig(nodes=tuple(nodes), torrent=torrent, groups=tuple(groups), seed=seed, sim=sim,
                           observed_rate_MBps=observed)
    try:
        cfg.torrent_meta()
    except ValueError as exc:
        raise r.err(str(exc), "torrent") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


# -- serialization -----------------------------------------------------------
def _num(x) -> str:
    if x is None:
        return UNLIMITED
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text; parsing it gives back an equal configuration."""
    out = ["[cluster]", "nodes = " + ", ".join(n.node_id for n in cfg.nodes)]
    first = cfg.nodes[0]
    for k in ("loopback_MBps", "nic_ul_MBps", "nic_dl_MBps"):
        out.append(f"{k} = {_num(getattr(first, k))}")
    for n in cfg.nodes[1:]:
        diff = [k for k in ("loopback_MBps", "nic_ul_MBps", "nic_dl_MBps") if getattr(n, k) != getattr(first, k)]
        if diff:
            out += ["", f"[node.{n.node_id}]"] + [f"{k} = {_num(getattr(n, k))}" for k in diff]
    t = cfg.torrent
    out += ["", "[torrent]", f"file_size_MB = {_num(t.file_size_MB)}", f"slice_size_KiB = {t.slice_size_KiB}",
            f"piece_rule = {t.piece_rule}"]
    if t.piece_size_KiB is not None:
        out.append(f"piece_size_KiB = {t.piece_size_KiB}")
    for g in cfg.groups:
        out += ["", f"[peers.{g.name}]", f"count = {g.count}", f"node = {g.node}",
                f"ul_cap_MBps = {_num(g.ul_cap_MBps)}", f"dl_cap_MBps = {_num(g.dl_cap_MBps)}",
                f"slots = {'auto' if g.slots is None else g.slots}", f"strategy = {g.strategy}",
                f"join_s = {_num(g.join_s)}",
                f"leave_after_s = {'stay' if g.leave_after_s is None else _num(g.leave_after_s)}"]
    s = cfg.seed
    out += ["", "[seedpeer]", f"node = {s.node}", f"ul_cap_MBps = {_num(s.ul_cap_MBps)}",
            f"slots = {'auto' if s.slots is None else s.slots}"]
    sim = cfg.sim
    out += ["", "[sim]"]
    for f in fields(SimSection):
        v = getattr(sim, f.name)
        out.append(f"{f.name} = {'complete' if f.name == 'duration' and v is None else _num(v)}")
    if cfg.observed_rate_MBps is not None:
        out += ["", "[plan]", f"observed_rate_MBps = {_num(cfg.observed_rate_MBps)}"]
    return "\n".join(out) + "\n"
