# %% [markdown]
# # Why busy links delay HAVE messages
#
# Control messages share links with data. The delay of a message grows with
# the link's backlog and shrinks with whatever capacity data leaves free,
# never less than a floor fraction of the link.

# %%
import numpy as np

from btcluster.netfluid import LinkState, control_delay

MB = 1e6

# %% [markdown]
# ## Delay of a 9-byte HAVE against NIC load
#
# The floor decides how slow a saturated link gets. The bundled experiment
# configs use 5e-4; the library default is 0.01.

# %%
loads = np.array([0.0, 0.5, 0.9, 0.99, 0.999, 1.0])
print("load   " + "  ".join(f"floor={f:<7g}" for f in (0.01, 5e-4)))
for x in loads:
    row = []
    for floor in (0.01, 5e-4):
        link = LinkState("nic", 125 * MB, data_rate=x * 125 * MB, backlog=50_000)
        row.append(control_delay(9, link, control_floor=floor) * 1e3)
    print(f"{x:5.3f}  " + "  ".join(f"{d:10.3f} ms " for d in row))

# %% [markdown]
# A saturated NIC with a loopback beside it that still has room means HAVEs
# from foreign buddies arrive late. Native buddies learn about new pieces
# first and keep requesting from each other.

# %%
nic = LinkState("nic", 125 * MB, data_rate=125 * MB, backlog=100_000)
lo = LinkState("lo", 500 * MB, data_rate=300 * MB, backlog=100_000)
print(f"foreign HAVE {control_delay(9, nic, control_floor=5e-4) * 1e3:.1f} ms, "
      f"native HAVE {control_delay(9, lo, control_floor=5e-4) * 1e3:.2f} ms")
