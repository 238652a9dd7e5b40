"""Fluid network model of a cluster.

Each physical node has a loopback device and a NIC with separate upload and
download capacities. Flows between peers on the same node (native) go over
loopback and are charged twice, once for sending and once for receiving, so
a loopback of capacity L carries at most L/2 of native traffic. Flows between
nodes (foreign) are charged once against the sender's NIC upload and once
against the receiver's NIC download. On top of that every peer may carry its
own upload and download cap.

Rates are shared with max-min fairness (progressive filling). Control
messages see a queueing delay that depends on the capacity left over by data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "NodeSpec",
    "Flow",
    "ResourceGraph",
    "LinkState",
    "UnknownEndpointError",
    "progressive_fill",
    "resource_usage",
    "allocate_rates",
    "charged_usage",
    "control_delay",
    "path_control_delay",
    "classify_flow",
    "NATIVE",
    "FOREIGN",
]

NATIVE = "native"
FOREIGN = "foreign"
LOOPBACK_CHARGE = 2.0
REL_EPS = 1e-12


class UnknownEndpointError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    """Physical node capacities in bytes/s."""

    node_id: Hashable
    loopback_capacity: float
    nic_upload_capacity: float
    nic_download_capacity: float

    def __post_init__(self):
        for name in ("loopback_capacity", "nic_upload_capacity", "nic_download_capacity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Flow:
    flow_id: Hashable
    src_peer: Hashable
    dst_peer: Hashable
    src_node: Hashable
    dst_node: Hashable
    demand: float = math.inf
    allocated: float = 0.0

    @property
    def native(self) -> bool:
        return self.src_node == self.dst_node


def classify_flow(flow: Flow) -> str:
    return NATIVE if flow.src_node == flow.dst_node else FOREIGN


@dataclass
class ResourceGraph:
    """Nodes, per-peer caps (None = unbounded) and the active flow set."""

    nodes: Mapping[Hashable, NodeSpec]
    peer_up_cap: Mapping[Hashable, Optional[float]] = field(default_factory=dict)
    peer_down_cap: Mapping[Hashable, Optional[float]] = field(default_factory=dict)
    flows: list[Flow] = field(default_factory=list)

    def validate(self):
        for f in self.flows:
            for node in (f.src_node, f.dst_node):
                if node not in self.nodes:
                    raise UnknownEndpointError(f"flow {f.flow_id!r} references unknown node {node!r}")

    def incidence(self):
        """Sparse (flow, resource, weight) triplets plus resource keys/capacities.

        Unbounded resources are left out entirely.
        """
        self.validate()
        keys: dict = {}
        caps: list[float] = []

        def rid(key, cap):
            if key not in keys:
                keys[key] = len(caps)
                caps.append(cap)
            return keys[key]

        fl, rs, ws = [], [], []
        for i, f in enumerate(self.flows):
            entries = []
            up = self.peer_up_cap.get(f.src_peer)
            if up is not None and math.isfinite(up):
                entries.append((("up", f.src_peer), up, 1.0))
            down = self.peer_down_cap.get(f.dst_peer)
            if down is not None and math.isfinite(down):
                entries.append((("down", f.dst_peer), down, 1.0))
            if f.native:
                n = self.nodes[f.src_node]
                entries.append((("lo", f.src_node), n.loopback_capacity, LOOPBACK_CHARGE))
            else:
                s, d = self.nodes[f.src_node], self.nodes[f.dst_node]
                entries.append((("nic_up", f.src_node), s.nic_upload_capacity, 1.0))
                entries.append((("nic_dn", f.dst_node), d.nic_download_capacity, 1.0))
            for key, cap, w in entries:
                fl.append(i)
                rs.append(rid(key, cap))
                ws.append(w)
        return (
            np.asarray(fl, dtype=np.intp),
            np.asarray(rs, dtype=np.intp),
            np.asarray(ws, dtype=float),
            list(keys),
            np.asarray(caps, dtype=float),
        )


def progressive_fill(demand, flow_of, res_of, weight, capacity) -> np.ndarray:
    """Max-min fair rates by progressive filling.

    ``demand`` holds one entry per flow (``inf`` for unbounded). The triplets
    ``(flow_of[e], res_of[e], weight[e])`` say that flow ``flow_of[e]`` consumes
    ``weight[e]`` units of resource ``res_of[e]`` per unit of rate.

    All unfrozen flows rise together. At each step either every flow whose
    demand is below the next saturation level is frozen at its demand, or the
    resources that saturate first freeze the flows crossing them.
    """
    demand = np.asarray(demand, dtype=float)
    capacity = np.asarray(capacity, dtype=float)
    flow_of = np.asarray(flow_of, dtype=np.intp)
    res_of = np.asarray(res_of, dtype=np.intp)
    weight = np.asarray(weight, dtype=float)
    n_res = capacity.size
    rate = np.zeros(demand.size)
    active = demand > 0
    while active.any():
        act_e = active[flow_of]
        w_act = np.bincount(res_of, weights=weight * act_e, minlength=n_res)
        used = np.bincount(res_of, weights=weight * rate[flow_of] * ~act_e, minlength=n_res)
        live = w_act > 0
        if live.any():
            levels = np.full(n_res, np.inf)
            levels[live] = np.maximum(capacity[live] - used[live], 0.0) / w_act[live]
            lam = levels.min()
        else:
            lam = np.inf
        d_act = np.where(active, demand, np.inf)
        if d_act.min() <= lam:
            done = active & (demand <= lam)
            rate[done] = demand[done]
            active &= ~done
            continue
        if not math.isfinite(lam):
            raise ValueError("unbounded flow crosses no finite resource")
        sat = live & (levels <= lam * (1 + REL_EPS) + 1e-300)
        hit = np.zeros(demand.size, dtype=bool)
        hit[flow_of[sat[res_of] & act_e]] = True
        rate[hit] = lam
        active &= ~hit
    return rate


def resource_usage(rate, flow_of, res_of, weight, n_res: int) -> np.ndarray:
    return np.bincount(res_of, weights=weight * np.asarray(rate)[flow_of], minlength=n_res)


def allocate_rates(graph: ResourceGraph) -> dict:
    """Max-min fair allocation for every flow in ``graph``: flow_id -> bytes/s."""
    flow_of, res_of, weight, _keys, caps = graph.incidence()
    demand = np.array([f.demand for f in graph.flows], dtype=float)
    rates = progressive_fill(demand, flow_of, res_of, weight, caps)
    return {f.flow_id: float(r) for f, r in zip(graph.flows, rates)}


def charged_usage(graph: ResourceGraph, rates: Mapping) -> dict:
    """Charged rate per resource key, with the capacity, for audits."""
    flow_of, res_of, weight, keys, caps = graph.incidence()
    r = np.array([rates[f.flow_id] for f in graph.flows], dtype=float)
    used = resource_usage(r, flow_of, res_of, weight, len(keys))
    return {k: (float(u), float(c)) for k, u, c in zip(keys, used, caps)}


@dataclass
class LinkState:
    """One shared resource as seen by control traffic."""

    resource_id: Hashable
    capacity: float
    data_rate: float = 0.0
    backlog: float = 0.0

    def residual(self, control_floor: float = 0.01) -> float:
        return max(self.capacity - self.data_rate, control_floor * self.capacity)

    def queue_delay(self, message_size: float, control_floor: float = 0.01) -> float:
        return (self.backlog + message_size) / self.residual(control_floor)

    def drain(self, dt: float, control_floor: float = 0.01):
        self.backlog = max(0.0, self.backlog - self.residual(control_floor) * dt)


def control_delay(message_size: float, link: LinkState, base_latency: float = 1e-3,
                  control_floor: float = 0.01) -> float:
    """Delay of one control message behind the link's data and control backlog.

    The message joins the backlog, so later messages wait for it.
    """
    if message_size <= 0:
        raise ValueError("message_size must be positive")
    delay = base_latency + link.queue_delay(message_size, control_floor)
    link.backlog += message_size
    return delay


def path_control_delay(message_size: float, links: Sequence[LinkState], base_latency: float = 1e-3,
                       control_floor: float = 0.01) -> float:
    """Delay over several links in series: the slowest link dominates."""
    return max(control_delay(message_size, l, base_latency, control_floor) for l in links)
