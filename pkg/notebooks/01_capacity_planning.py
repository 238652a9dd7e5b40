# %% [markdown]
# # Planning a cluster experiment before running it
#
# Peers on the same node talk over loopback; peers on different nodes go
# through the NICs. With uniform random peer lists we can predict how much
# traffic lands on each path and check it against node limits.

# %%
import numpy as np

from btcluster.netfluid import NodeSpec
from btcluster.planner import (
    ExperimentPlan,
    check_constraints,
    connection_matrix,
    naive_fit,
    naive_max_peers,
    traffic_matrix,
)

MB = 1e6
node = NodeSpec("node", 500 * MB, 125 * MB, 125 * MB)
np.set_printoptions(precision=4, suppress=True)

# %% [markdown]
# ## Who connects to whom
#
# A peer on node i sees m_i - 1 native candidates and m_j foreign ones.

# %%
for m in (10, 40, 200):
    plan = ExperimentPlan.uniform(2, m, node, upload_cap=5 * MB, observed_rate=4.25 * MB)
    print(f"m={m:4d}", connection_matrix(plan)[0])

# %% [markdown]
# ## Two experiments, 5 MB/s upload cap
#
# Download is unlimited, so the measured average rate (4.25 MB/s) stands in
# for it. 40 peers per node fit; 60 push more than 125 MB/s through each NIC.

# %%
for m in (40, 60):
    plan = ExperimentPlan.uniform(2, m, node, upload_cap=5 * MB, observed_rate=4.25 * MB)
    report = check_constraints(traffic_matrix(plan), plan)
    print(f"--- {m} peers per node")
    print(report.render())

# %% [markdown]
# ## Where does it break?
#
# Sweep peers per node and record the first count that violates a bound.

# %%
first_bad = None
for m in range(10, 101):
    plan = ExperimentPlan.uniform(2, m, node, upload_cap=5 * MB, observed_rate=4.25 * MB)
    if not check_constraints(traffic_matrix(plan), plan).safe:
        first_bad = m
        break
print("first unsafe peers/node:", first_bad)

# %% [markdown]
# ## Single-node rule of thumb
#
# On one node the aggregate saturates, so rate ~ a / peers. Fit a from a few
# measurements and invert it for a target per-peer rate.

# %%
peers = np.array([80, 100, 120, 160])
rates = 560 / peers * (1 + 0.02 * np.array([1, -1, 0.5, -0.5]))
a = naive_fit(list(zip(peers, rates)))
print(f"a = {a:.1f} MB/s*peers")
for target in (5, 10):
    print(f"  at {target} MB/s per peer: up to {naive_max_peers(a, target)} peers")
