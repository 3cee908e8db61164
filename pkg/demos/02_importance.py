"""Which part of a cycle tells us about its capacity.

Run with ``python demos/02_importance.py``.
"""

# %%
import numpy as np

from soh_twin.dataset import SyntheticConfig, generate_synthetic
from soh_twin.importance import analyse_importance, fit_grid, grid_encode
from soh_twin.warp import synchronize_battery

record = generate_synthetic(SyntheticConfig(n_cycles=60, base_length=120), seed=7)
synced = synchronize_battery(record)

# %% spread across cycles at every synchronized step, scaled to a max of 1
profile = analyse_importance(synced)
a, b = profile.interval
print("knee at k =", profile.knee_index + 1, "threshold", round(profile.threshold, 3))
print("important steps", a + 1, "to", b + 1, f"({profile.length} of {synced.reference_length})")

# coarse text plot of the profile
for k in range(0, synced.reference_length, 8):
    mark = "*" if profile.contains(k) else " "
    print(f"{k + 1:4d} {mark} " + "#" * int(40 * profile.scores[k]))

# %% one-hot grid encoding of a single cycle inside that interval
grid = fit_grid(synced, 50, profile.interval)
enc = grid_encode(synced.synced[10], profile.interval, grid)
print("encoded matrix", enc.matrix.shape, "ones per column", np.unique(enc.matrix.sum(axis=0)))
print("voltage bins of the first 10 steps", np.argmax(enc.matrix[:50, :10], axis=0))
