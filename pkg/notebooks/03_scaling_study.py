"""How far does the loss minimizer spread out in one dimension?

Run with ``python3 notebooks/03_scaling_study.py`` (about a minute).
"""

# %%
import math

import numpy as np

from grwsmooth import scale_lab as sl

# %% [markdown]
# Uniform configurations with unit spacing: the speed term is exactly
# (T-1)/2 and the ordering term stays below ln((T-1)!).

# %%
for T in range(3, 11):
    L_a, L_v, L = sl.loss_1d(sl.uniform_config(T, T - 1))
    print(f"T={T:2d} L_v={L_v:.1f} L_a={L_a:.4f} ln((T-1)!)={math.log(math.factorial(T - 1)):.4f}")

# %% [markdown]
# The total loss never drops below R^2 / (2(T-1)).

# %%
rng = np.random.default_rng(0)
slack = []
for i in range(300):
    cfg = sl.random_config(3 + i % 6, rng)
    slack.append(sl.loss_1d(cfg)[2] - sl.lower_bound(cfg))
print("smallest slack over 300 random configurations:", min(slack))

# %% [markdown]
# Minimize over all monotone configurations and compare the extent with
# T sqrt(ln T).

# %%
rows = sl.scaling_study(3, 9, restarts=10)
print(" T   R*      L*      ratio")
for r in rows:
    print(f"{r.T:2d} {r.R_star:7.3f} {r.L_star:7.3f} {r.ratio:7.3f}")
ratios = [r.ratio for r in rows]
print("max/min ratio:", max(ratios) / min(ratios))
print("minimizer at T=6:", np.round(rows[3].z_star, 3))
