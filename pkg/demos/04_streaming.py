"""Estimating capacity while a cycle is still running.

At each new sample the partial cycle is completed with the tail of the most
similar training cycle, synchronized and passed to the regressor.
Run with ``python demos/04_streaming.py``.
"""

# %%
import dataclasses

from soh_twin import pipeline
from soh_twin.dataset import SyntheticConfig, generate_synthetic
from soh_twin.realtime import match_and_reconstruct, stream_cycle

synth = SyntheticConfig(n_cycles=60, base_length=100)
cfg = pipeline.PipelineConfig(synthetic=synth).with_seed(7)
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, hidden=16, max_epochs=100, validation_fraction=0.0))
record = generate_synthetic(synth, seed=7)
fit = pipeline.run_offline(record, cfg)
prep = fit.prepared
session = pipeline.make_session(record, prep.train_record, fit.params, prep.grid, cfg)

# %% matching a short prefix
cycle = prep.test_record.cycles[5]
rec = match_and_reconstruct(cycle.samples[:, :30], prep.train_record)
print(f"cycle {cycle.cycle_index}: first 30 samples best match cycle {rec.matched_cycle}, distance {rec.similarity:.4f}")

# %% a full stream
estimates = stream_cycle(cycle, session)
truth = prep.test_record.capacity(cycle.cycle_index)
for e in estimates[:: max(1, len(estimates) // 8)]:
    flag = "in interval" if e.in_important_interval else ""
    print(f"k={e.step:4d} estimate {e.capacity:.4f} Ah (truth {truth:.4f}) matched {e.matched_cycle:3d} {flag}")

# %% a training cycle streamed to its end gives the offline estimate exactly
c = int(prep.train_record.cycle_indices[3])
online = stream_cycle(record.cycle(c), session)[-1].capacity
print("online == offline:", online == fit.train_pred[3])
