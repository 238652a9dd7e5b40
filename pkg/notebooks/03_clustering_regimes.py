# %% [markdown]
# # Do peers cluster by node?
#
# Run the two bundled 2-node scenarios over a few peer counts and look at the
# share of upload connections (and received bytes) that stay on the node.
# Without any preference the connection share would sit near
# (m - 1) / (2m - 1), just under one half.
#
# Set PEERS (comma separated) to change the sweep; the defaults take a few
# minutes on one core.

# %%
import os
import time
from pathlib import Path

from btcluster.config import load_config
from btcluster.engine import Simulation
from btcluster.metrics import MetricsSink

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PEERS = [int(x) for x in os.environ.get("PEERS", "20,60,100").split(",")]


def native_shares(name, peers, seed=1):
    cfg = load_config(CONFIGS / name).with_peers_per_group(peers).with_seed(seed)
    sink = MetricsSink()
    Simulation(cfg.to_sim_config(), sink).run()
    row = next(r for r in sink.summary_rows if r["group"] == "all")
    return row["native_conn_frac"], row["native_traffic_frac"], row["avg_dl_Bps"] / 1e6


# %% [markdown]
# ## Upload-constrained
#
# Each leecher uploads at most 5 MB/s. Once the NICs fill, foreign buddies
# deliver less and native ones win the choke rounds.

# %%
for m in PEERS:
    t0 = time.perf_counter()
    conn, byte_share, avg = native_shares("upload_constrained_2node.ini", m)
    print(f"m={m:4d}  baseline={(m - 1) / (2 * m - 1):.3f}  native conn={conn:.3f}  "
          f"bytes={byte_share:.3f}  avg={avg:.2f} MB/s  ({time.perf_counter() - t0:.0f} s)")

# %% [markdown]
# ## Download-constrained, rarest-first vs random
#
# Here the connection share can stay foreign while most bytes still come
# from native buddies, because their piece announcements arrive first.

# %%
for name in ("download_constrained_2node.ini", "random_selection_2node.ini"):
    print(name)
    for m in PEERS:
        conn, byte_share, avg = native_shares(name, m)
        print(f"  m={m:4d}  native conn={conn:.3f}  bytes={byte_share:.3f}  avg={avg:.2f} MB/s")
