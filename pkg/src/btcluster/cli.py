"""Command line: ``btcluster plan|simulate|sweep``.

Exit codes: 0 success (or safe plan), 1 capacity violation, 2 usage or
config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .engine import Simulation, average_download_rate
from .metrics import MetricsSink, write_streams
from .planner import PlanError, check_constraints, connection_matrix, traffic_matrix

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

SWEEP_FIELDS = ["peers_per_node", "status", "avg_dl_Bps", "agg_dl_Bps", "native_conn_frac",
                "native_traffic_frac", "end_time_s"]


class UsageError(Exception):
    pass


def parse_vary(spec: str) -> list[int]:
    """``peers=20:200:20`` (inclusive) or ``peers=20,40,60``."""
    name, sep, values = spec.partition("=")
    if not sep or name.strip() != "peers":
        raise UsageError(f"--vary expects peers=<values>, got {spec!r}")
    values = values.strip()
    if not values:
        raise UsageError("--vary needs at least one value")
    try:
        if ":" in values:
            parts = [int(x) for x in values.split(":")]
            if len(parts) == 2:
                parts.append(1)
            if len(parts) != 3 or parts[2] <= 0:
                raise ValueError
            lo, hi, step = parts
            out = list(range(lo, hi + 1, step))
        else:
            out = [int(x) for x in values.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --vary value {values!r}") from None
    if not out:
        raise UsageError("--vary produced an empty list")
    if any(v < 0 for v in out):
        raise UsageError("peer counts must be non-negative")
    return out


def _load(path, seed) -> ExperimentConfig:
    cfg = load_config(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def _plan_text(cfg: ExperimentConfig, observed_MBps=None) -> tuple[str, bool]:
    if observed_MBps is not None and cfg.observed_rate_MBps is None:
        from dataclasses import replace
        cfg = replace(cfg, observed_rate_MBps=observed_MBps)
    plan = cfg.to_plan()
    p = connection_matrix(plan)
    report = check_constraints(traffic_matrix(plan), plan)
    names = [n.node_id for n in plan.nodes]
    lines = [f"nodes: {', '.join(map(str, names))}", f"peers per node: {', '.join(map(str, plan.m))}",
             "connection probabilities P (row = from, column = to):"]
    lines += ["  " + "  ".join(f"{x:9.4f}" for x in row) for row in p]
    lines.append("")
    return "\n".join(lines) + "\n" + report.render(), report.safe


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def cmd_plan(args) -> int:
    cfg = _load(args.config, args.seed)
    try:
        text, safe = _plan_text(cfg)
    except PlanError as exc:
        raise UsageError(f"cannot plan: {exc}") from None
    sys.stdout.write(text)
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        _write(os.path.join(args.output, "plan_report.txt"), text)
    return EXIT_OK if safe else EXIT_VIOLATION


def simulate_to_dir(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run one simulation and write its CSVs, summary and plan report."""
    os.makedirs(out_dir, exist_ok=True)
    sink = MetricsSink()
    summary = Simulation(cfg.to_sim_config(), sink).run()
    write_streams(sink, out_dir)
    try:
        avg = average_download_rate(summary)
    except ValueError:
        avg = math.nan
    all_row = next((r for r in sink.summary_rows if r["group"] == "all"), None)
    lines = [
        f"simulated time: {summary.end_time:.1f} s ({summary.ticks} ticks)",
        f"leechers: {len(summary.leechers)}, finished: {sum(p.finish_time is not None for p in summary.leechers)}",
        f"bytes uploaded: {summary.bytes_up_total}, bytes downloaded: {summary.bytes_down_total}",
    ]
    for r in sink.summary_rows:
        lines.append(f"group {r['group']}: peers={r['peers']} avg_dl={r['avg_dl_Bps'] / 1e6:.3f} MB/s "
                     f"agg_dl={r['agg_dl_Bps'] / 1e6:.1f} MB/s native_conn={r['native_conn_frac']:.3f} "
                     f"native_traffic={r['native_traffic_frac']:.3f}")
    _write(os.path.join(out_dir, "summary.txt"), "\n".join(lines) + "\n")
    try:
        text, _safe = _plan_text(cfg, None if math.isnan(avg) else avg / 1e6)
        _write(os.path.join(out_dir, "plan_report.txt"), text)
    except PlanError as exc:
        _write(os.path.join(out_dir, "plan_report.txt"), f"no plan: {exc}\n")
    row = {"end_time_s": summary.end_time}
    for k in ("avg_dl_Bps", "agg_dl_Bps", "native_conn_frac", "native_traffic_frac"):
        row[k] = all_row[k] if all_row else math.nan
    return row


def cmd_simulate(args) -> int:
    cfg = _load(args.config, args.seed)
    row = simulate_to_dir(cfg, args.output)
    print(f"wrote {args.output}: avg_dl={row['avg_dl_Bps'] / 1e6:.3f} MB/s "
          f"native_conn={row['native_conn_frac']:.3f} native_traffic={row['native_traffic_frac']:.3f}")
    return EXIT_OK


def _sweep_point(text: str, count: int, out_dir: str) -> dict:
    cfg = parse_config(text).with_peers_per_group(count)
    try:
        row = simulate_to_dir(cfg, out_dir)
        row["status"] = "ok"
    except Exception as exc:  # recorded per point, the sweep goes on
        _write(os.path.join(out_dir, "error.txt"), traceback.format_exc())
        row = {k: math.nan for k in SWEEP_FIELDS}
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    row["peers_per_node"] = count
    return row


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def cmd_sweep(args) -> int:
    counts = parse_vary(args.vary)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    cfg = _load(args.config, args.seed)
    text = dump_config(cfg)
    os.makedirs(args.output, exist_ok=True)
    dirs = [os.path.join(args.output, f"peers_{c:04d}") for c in counts]
    for d in dirs:
        os.makedirs(d, exist_ok=True)
    if args.jobs == 1 or len(counts) == 1:
        rows = [_sweep_point(text, c, d) for c, d in zip(counts, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(counts))) as pool:
            rows = list(pool.map(_sweep_point, [text] * len(counts), counts, dirs))
    with open(os.path.join(args.output, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SWEEP_FIELDS])
    failed = [r for r in rows if r["status"] != "ok"]
    for r in rows:
        print(f"peers/node={r['peers_per_node']}: {r['status']}")
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override [sim] rng_seed (unsigned 64-bit)")
    parser = argparse.ArgumentParser(prog="btcluster", parents=[common],
                                     description="BitTorrent-on-a-cluster simulator and capacity planner")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("plan", parents=[common], help="traffic matrix and capacity verdicts")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="directory for plan_report.txt")
    p.set_defaults(func=cmd_plan)
    s = sub.add_parser("simulate", parents=[common], help="run one simulation")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)
    w = sub.add_parser("sweep", parents=[common], help="simulate over several peer counts")
    w.add_argument("config")
    w.add_argument("--vary", required=True, help="peers=START:STOP:STEP or peers=A,B,C (peers per group)")
    w.add_argument("-o", "--output", required=True)
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    args.seed = getattr(args, "seed", None)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("btcluster: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"btcluster: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"btcluster: {exc}", file=sys.stderr)
        return EXIT_USAGE if not os.path.exists(getattr(exc, "filename", "") or "") else EXIT_RUNTIME
    except Exception as exc:
        print(f"btcluster: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
