# %% [markdown]
# # Infinite horizon, average cost and bounds

# %%
import numpy as np

from underflow import validate
from underflow import bounds as B
from underflow.fixtures import random_two_rx_instance, two_state
from underflow.horizon import estimate_rho, fixed_point_gap, value_iterate
from underflow.sim import simulate

v = validate(two_state(alpha=0.9, h=0.5))
sol = value_iterate(v, tol=1e-10, step=0.5)
print(sol.iterations, "sweeps, b_inf =", sol.b_inf.ravel(), "gap", fixed_point_gap(sol))

# %% [markdown]
# rho*(alpha) = (1 - alpha) min V_alpha, extrapolated linearly to alpha = 1.

# %%
est = estimate_rho(v, step=0.5, slots=40, alphas=(0.9, 0.95, 0.99, 0.995, 0.999))
print(est.to_csv())
print("rho* ~", est.rho_star)

# %% [markdown]
# Lagrangian bound and its greedy policy on a random two-receiver instance.

# %%
w = validate(random_two_rx_instance(np.random.default_rng(0)))
lag = B.lagrangian_bound(w, step=0.25, exact=True)
print("lambda*", lag.lam, "bound", lag.value, "gap to exact", lag.gap)
st = simulate(B.greedy_feasible(w, lag), w, 5000, w.N, seed=0, x0=np.zeros(2))
print("greedy", st.mean, "+/-", st.stderr)
