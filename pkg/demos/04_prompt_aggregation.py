"""Gaussian-weighted aggregation of per-epoch prompt snapshots."""

# %%
import numpy as np

from promptreg.ensembling import AggregationState, finalize, gaussian_weights, update
from promptreg.prompting import PromptSet

# %% [markdown]
# Weights for a 20-epoch schedule centred late in training.  A narrow
# Gaussian trusts a few late epochs; a very wide one is a plain average.

# %%
for mu, s2 in ((15, 1), (15, 10), (15, 1e9)):
    w = gaussian_weights(20, mu, s2)
    print(f"mu={mu} sigma2={s2:g}: " + " ".join(f"{v:.2f}" for v in w))

# %% [markdown]
# Aggregating a noisy trajectory: each epoch is the true prompt plus noise.
# Averaging the snapshots cancels some of it.  EMA with beta = 0.999 barely
# moves off the first epoch.

# %%
rng = np.random.default_rng(0)
target = rng.normal(size=(4, 8))
E = 20
states = {m: AggregationState(m, E, mu=15, sigma2=1) for m in ("gpa", "equal", "ema")}
for epoch in range(1, E + 1):
    drift = 1.0 - epoch / E  # early epochs are further from the target
    snap = PromptSet.from_arrays([target + drift * rng.normal(size=target.shape) + 0.3 * rng.normal(size=target.shape)],
                                 [target.copy()])
    for s in states.values():
        update(s, snap, epoch)
for mode, s in states.items():
    err = np.linalg.norm(finalize(s).vision[0].data - target)
    print(f"{mode:<6} distance to target {err:.3f}")
