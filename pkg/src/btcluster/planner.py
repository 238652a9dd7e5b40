"""Analytical capacity planning for cluster experiments.

Given peers per node, per-peer caps and node capacities, estimate the
node-to-node traffic matrix under uniform random peer lists and check it
against NIC and loopback limits before running anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .netfluid import NodeSpec

__all__ = [
    "ExperimentPlan",
    "PlanError",
    "Check",
    "PlanReport",
    "connection_prob",
    "connection_matrix",
    "aggregate_rates",
    "traffic_matrix",
    "check_constraints",
    "naive_fit",
    "naive_max_peers",
]


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    """Rates in bytes/s; ``None`` caps mean unlimited."""

    m: tuple
    nodes: tuple
    upload_cap: Optional[float] = None
    download_cap: Optional[float] = None
    observed_rate: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(int(x) for x in self.m))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if len(self.m) < 1:
            raise PlanError("need at least one node")
        if len(self.nodes) != len(self.m):
            raise PlanError(f"{len(self.m)} peer counts but {len(self.nodes)} node specs")
        if any(x < 1 for x in self.m):
            raise PlanError("every node needs at least one peer")
        if sum(self.m) < 2:
            raise PlanError("need at least two peers in total")
        for name in ("upload_cap", "download_cap", "observed_rate"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise PlanError(f"{name} must be positive")

    @property
    def n(self) -> int:
        return len(self.m)

    @classmethod
    def uniform(cls, n: int, peers_per_node: int, node: NodeSpec, **kw) -> "ExperimentPlan":
        nodes = tuple(NodeSpec(i, node.loopback_capacity, node.nic_upload_capacity, node.nic_download_capacity)
                      for i in range(n))
        return cls(m=(peers_per_node,) * n, nodes=nodes, **kw)


def connection_prob(plan: ExperimentPlan, i: int, j: int) -> float:
    """Chance that a buddy of a peer on node ``i`` sits on node ``j``."""
    if not (0 <= i < plan.n and 0 <= j < plan.n):
        raise IndexError(f"node index out of range: ({i}, {j})")
    total = sum(plan.m) - 1
    return (plan.m[i] - 1) / total if i == j else plan.m[j] / total


def connection_matrix(plan: ExperimentPlan) -> np.ndarray:
    m = np.asarray(plan.m, dtype=float)
    p = np.tile(m, (plan.n, 1))
    p[np.diag_indices(plan.n)] -= 1
    return p / (m.sum() - 1)


def aggregate_rates(plan: ExperimentPlan) -> tuple[np.ndarray, np.ndarray]:
    """Per-node aggregate upload U and download D.

    A capped direction uses the cap; an unlimited one uses the observed
    per-peer rate.
    """
    def side(cap):
        rate = cap if cap is not None else plan.observed_rate
        if rate is None:
            raise PlanError("unlimited direction needs an observed rate")
        return np.asarray(plan.m, dtype=float) * rate

    return side(plan.upload_cap), side(plan.download_cap)


def traffic_matrix(plan: ExperimentPlan) -> np.ndarray:
    """T[i, j]: expected bytes/s from node i to node j (diagonal = loopback)."""
    if plan.upload_cap is None and plan.download_cap is None and plan.observed_rate is None:
        raise PlanError("both directions unlimited and no observed rate")
    u, d = aggregate_rates(plan)
    return connection_matrix(plan) * np.minimum.outer(u, d)


@dataclass(frozen=True)
class Check:
    node: object
    kind: str  # nic_in, nic_out, loopback, lower_ul, lower_dl, lower_loopback
    load: float
    limit: float
    bound: str  # "upper" or "lower"

    @property
    def slack(self) -> float:
        return self.limit - self.load

    @property
    def ok(self) -> bool:
        return self.load <= self.limit * (1 + 1e-12)


@dataclass
class PlanReport:
    """Verdicts per node and inequality.

    Only the upper bounds decide ``safe``; the lower bounds hold the whole
    aggregate to a single path and are informational.
    """

    matrix: np.ndarray
    checks: list = field(default_factory=list)

    @property
    def violations(self) -> list:
        return [c for c in self.checks if c.bound == "upper" and not c.ok]

    @property
    def safe(self) -> bool:
        return not self.violations

    @property
    def lower_bounds_hold(self) -> bool:
        return all(c.ok for c in self.checks if c.bound == "lower")

    def verdict(self, node, kind) -> bool:
        for c in self.checks:
            if c.node == node and c.kind == kind:
                return c.ok
        raise KeyError((node, kind))

    def render(self, unit: float = 1e6, unit_name: str = "MB/s") -> str:
        lines = ["traffic matrix (" + unit_name + "), row = from, column = to:"]
        for row in self.matrix:
            lines.append("  " + "  ".join(f"{x / unit:9.1f}" for x in row))
        lines.append("")
        lines.append(f"{'node':>8} {'check':<15} {'bound':<6} {'load':>10} {'limit':>10} {'slack':>10}  verdict")
        for c in self.checks:
            lines.append(f"{str(c.node):>8} {c.kind:<15} {c.bound:<6} {c.load / unit:10.1f} {c.limit / unit:10.1f} "
                         f"{c.slack / unit:10.1f}  {'ok' if c.ok else 'VIOLATED'}")
        lines.append("")
        if self.safe:
            lines.append("verdict: SAFE (all upper-bound constraints hold)")
        else:
            names = ", ".join(f"{c.kind}@{c.node}" for c in self.violations)
            lines.append(f"verdict: VIOLATED ({names})")
        if not self.lower_bounds_hold:
            lines.append("note: single-path lower bounds exceeded; safety relies on traffic spreading over nodes")
        return "\n".join(lines) + "\n"


def check_constraints(t, plan: ExperimentPlan) -> PlanReport:
    t = np.asarray(t, dtype=float)
    if t.shape != (plan.n, plan.n):
        raise PlanError(f"matrix shape {t.shape} does not match {plan.n} nodes")
    off = t.copy()
    np.fill_diagonal(off, 0.0)
    inflow = off.sum(axis=0)
    outflow = off.sum(axis=1)
    try:
        u, d = aggregate_rates(plan)
    except PlanError:
        u = d = None
    checks = []
    for i, spec in enumerate(plan.nodes):
        nid = spec.node_id
        checks.append(Check(nid, "nic_in", float(inflow[i]), spec.nic_download_capacity, "upper"))
        checks.append(Check(nid, "nic_out", float(outflow[i]), spec.nic_upload_capacity, "upper"))
        checks.append(Check(nid, "loopback", float(t[i, i]), spec.loopback_capacity / 2, "upper"))
        if u is not None:
            checks.append(Check(nid, "lower_ul", float(u[i]), spec.nic_upload_capacity, "lower"))
            checks.append(Check(nid, "lower_dl", float(d[i]), spec.nic_download_capacity, "lower"))
            checks.append(Check(nid, "lower_loopback", float(min(u[i], d[i])), spec.loopback_capacity / 2, "lower"))
    return PlanReport(matrix=t, checks=checks)


def naive_fit(samples: Sequence[tuple]) -> float:
    """Least-squares ``a`` for rate = a / peers."""
    pts = [(float(x), float(r)) for x, r in samples]
    if len(pts) < 2:
        raise PlanError("need at least two samples")
    if any(not (x > 0 and r > 0) or not (math.isfinite(x) and math.isfinite(r)) for x, r in pts):
        raise PlanError("samples must be positive and finite")
    inv = np.array([1.0 / x for x, _ in pts])
    r = np.array([r for _, r in pts])
    return float((r * inv).sum() / (inv * inv).sum())


def naive_max_peers(a: float, rate: float) -> int:
    if not (a > 0 and rate > 0):
        raise PlanError("a and rate must be positive")
    # nudge against 560/5 landing a hair below 112 in floating point
    return int(math.floor(a / rate * (1 + 1e-12)))
