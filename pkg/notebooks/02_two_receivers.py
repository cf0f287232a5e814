# %% [markdown]
# # Two receivers sharing a power budget
#
# Example with four IID channel states per receiver, P = 4.2 and three
# slots.  The stage-3 target lies between grid nodes, so it is refined
# off-grid.  From x = (0.2, 0.2) the optimal move spends the whole budget
# and pushes receiver 1 past its own target.

# %%
import time

import numpy as np

from underflow import validate
from underflow.dp import default_grids_2rx, solve_2rx
from underflow.fixtures import example2
from underflow.two_rx import RegionPolicy, build_region_policy

v = validate(example2())
t0 = time.perf_counter()
vg = solve_2rx(v, default_grids_2rx(v, 0.02))
print(f"solved in {time.perf_counter() - t0:.1f}s")

# %%
S = (1, 2)   # costs 2.0 and 2.001
pol = build_region_policy(vg)
print("grid target   ", pol.b(3, S))
print("refined target", RegionPolicy(vg, mode="refined").b(3, S), "vs", 101 / 75)

# %%
x = (0.2, 0.2)
print(pol.classify(3, x, S), pol.structured_action(3, x, S))

# %% [markdown]
# Region map on a coarse lattice (stage 3, the same channel pair).

# %%
from collections import Counter

rows = pol.region_map(3, S, stride=5)
print(Counter(r[2] for r in rows))
