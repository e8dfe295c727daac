"""Walkthrough of the random-walk smoothing loss on small clips.

Run with ``python3 notebooks/01_loss_walkthrough.py``.
"""

# %% [markdown]
# A three-frame clip moving at constant speed along a line. Only two
# orderings keep the first frame in place: the true one (zero acceleration)
# and the swap of the last two frames (acceleration -3).

# %%
import numpy as np

from grwsmooth import grw, tensor as tn
from grwsmooth.grw import GrwConfig

clip = np.array([[0.0], [1.0], [2.0]])
P = grw.enumerate_orderings(3)
print("orderings:\n", P)
print("accelerations per ordering:", [np.diff(clip[p, 0], 2) for p in P])
print("ordering probabilities:", grw.ordering_probabilities(clip, P))

br = grw.smooth_loss(clip, GrwConfig(T=3, alpha=0.5))
print({k: round(v, 7) for k, v in br.as_dict().items()})

# %% [markdown]
# The number of candidate orderings grows as (T-1)!. Up to the enumeration
# budget every ordering is scored; past it a seeded sample is drawn.

# %%
for T in range(3, 9):
    cfg = GrwConfig(T=T)
    print(T, len(grw.enumerate_orderings(T, limit=10**6)), "enumerated" if cfg.enumerates() else "sampled")

# %% [markdown]
# Smooth trajectories score lower than jittery ones, and shifting the whole
# sequence by a constant vector changes nothing.

# %%
rng = np.random.default_rng(0)
t = np.linspace(0, 2, 20)[:, None]
smooth_path = np.hstack([np.cos(t), np.sin(t), t])
jitter_path = smooth_path + rng.normal(0, 0.2, size=smooth_path.shape)
cfg = GrwConfig()
for name, Z in (("smooth", smooth_path), ("jittery", jitter_path)):
    a = float(grw.smooth_loss(Z, cfg).smooth)
    b = float(grw.smooth_loss(Z + [3.0, -1.0, 7.0], cfg).smooth)
    print(f"{name:8s} loss={a:.6f} shifted={b:.6f}")

# %% [markdown]
# The fused kernel's gradient against central differences, and against the
# op-by-op reference build of the same loss.

# %%
Z = rng.normal(size=(10, 4))
f = lambda z: grw.smooth_loss(z, cfg).smooth
print("grad check rel err:", tn.grad_check(f, Z))
fused = tn.analytic_gradient(f, Z)
ref = tn.analytic_gradient(lambda z: grw.smooth_loss_reference(z, cfg).smooth, Z)
print("fused vs reference:", np.abs(fused - ref).max())
