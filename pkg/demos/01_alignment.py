"""Aligning discharge cycles of different length.

Run with ``python demos/01_alignment.py``.
"""

# %%
import numpy as np

from soh_twin.dataset import SyntheticConfig, generate_synthetic
from soh_twin.warp import dtw_align, edtw_solve, relative_energy_error, synchronize_battery, synchronize_cycle

record = generate_synthetic(SyntheticConfig(n_cycles=60, base_length=120), seed=7)
print(record.battery_id, "cycles:", len(record), "lengths:", record.lengths.min(), "to", record.lengths.max())

# %% plain DTW on a toy pair: the repeated 1.0 is absorbed by a horizontal step
path, dist = dtw_align([0.0, 1.0, 1.0, 2.0], [0.0, 1.0, 2.0])
print("toy path", path.pairs(), "distance", dist)

# %% the energy-aware solver on a fresh cycle and a worn one
fresh, worn = record.cycles[0], record.cycles[-1]
sol = edtw_solve(fresh.samples, worn.samples)
print("objective per iteration", np.round(sol.objective_trace, 5), "converged", sol.converged)

# the worn cycle resampled onto the fresh cycle's time axis
aligned = synchronize_cycle(sol, worn.samples, fresh.length)
print("worn cycle", worn.samples.shape, "->", aligned.shape)
print("relative energy change", round(relative_energy_error(worn.samples, aligned), 5))

# %% the whole battery at once
synced = synchronize_battery(record)
err = synced.per_cycle_energy_error
print("synced tensor", synced.synced.shape)
print("energy error p50/p90/max", np.round(np.percentile(err, [50, 90, 100]), 5))
