"""Baseline vs smoothed training on rotating bodies.

Run with ``python3 notebooks/02_toy_experiment.py``. Set ``EPOCHS`` for a
quicker look; the default matches the full run (about 15 s per model).
"""

# %%
import os
import statistics

import numpy as np

from grwsmooth import synthgen, trainer
from grwsmooth.grw import GrwConfig
from grwsmooth.trainer import ModelConfig, TrainConfig

EPOCHS = int(os.environ.get("EPOCHS", 30))
SEEDS = (0, 1, 2)

data = synthgen.gen_dataset()
print(len(data.train), "train clips,", len(data.test), "test clips,",
      data.frames, "frames of", data.n_points, "points")

# %% [markdown]
# A single frame says nothing about the label: compare per-label means and
# spreads of one coordinate of the first frame.

# %%
X, y = data.arrays(data.train)
for lab, name in enumerate(synthgen.LABELS):
    first = X[y == lab, 0, 0]
    print(f"{name:5s} mean={first.mean():+.3f} std={first.std():.3f}")

# %% [markdown]
# Train the same model with and without the smoothing term.

# %%
results = {}
for seed in SEEDS:
    for name, lam in (("baseline", 0.0), ("grw", 0.1)):
        m = trainer.train(data, ModelConfig(), TrainConfig(epochs=EPOCHS, seed=seed, grw=GrwConfig(lam=lam)))
        results[name, seed] = m
        print(f"seed {seed} {name:8s} acc={m.final['test_accuracy']:.2f} "
              f"acc2={m.final['acc2']:.4f} vel2={m.final['vel2']:.4f}")

for name in ("baseline", "grw"):
    print(name, "median acc2:", statistics.median(results[name, s].final["acc2"] for s in SEEDS))

# %% [markdown]
# Test embeddings projected on their top two principal axes. Smoothed
# trajectories trace short, gently curving paths.

# %%
for name in ("baseline", "grw"):
    pca = results[name, 0].pca
    print(name, "explained variance of 2 axes:", np.round(pca.explained_ratio, 3))
    steps = np.diff(pca.coords.reshape(-1, data.frames, 2), axis=1)
    print("  mean step length in the plane:", float(np.linalg.norm(steps, axis=-1).mean()))
