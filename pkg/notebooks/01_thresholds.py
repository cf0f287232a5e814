# %% [markdown]
# # Critical numbers for one receiver
#
# A base-stock rule is optimal when the channel is IID and every segment of
# the power-rate curve ends on a whole number of slots of demand.  The
# critical numbers come from a short recursion; here they are checked
# against a brute-force DP.

# %%
import numpy as np

from underflow import validate
from underflow.dp import Grid1D, critical_levels, solve_1rx
from underflow.fixtures import three_state_iid
from underflow.threshold import BaseStockPolicy, compute_gamma_pwl, criticals_from_gamma

v = validate(three_state_iid(N=6))
tab = compute_gamma_pwl(v)
cr = criticals_from_gamma(tab)
print("targets b_n(s), one row per n:")
print(cr.b[1:, :, 0])

# %%
vg = solve_1rx(v, Grid1D.for_demand(1.0, v.N, 0.1))
for n in range(1, v.N + 1):
    assert np.allclose(cr.b[n], critical_levels(vg, n))
print("recursion and DP agree on every stage")

# %% [markdown]
# The policy sends up to the target of the current state, as far as the
# peak power allows.  From an empty buffer in the cheapest state with six
# slots left the target is four slots but one slot of peak power covers
# only three, so it sends three.

# %%
pol = BaseStockPolicy.from_spec(v)
print(pol.action(6, 0.0, 0))
