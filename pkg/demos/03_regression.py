"""Training the capacity regressor and saving it.

A small hidden layer keeps this quick; the defaults use two layers of 100.
Run with ``python demos/03_regression.py``.
"""

# %%
import dataclasses
import tempfile
from pathlib import Path

import numpy as np

from soh_twin import pipeline
from soh_twin.dataset import SyntheticConfig, generate_synthetic
from soh_twin.regressor import load, predict, save

synth = SyntheticConfig(n_cycles=80, base_length=120)
cfg = pipeline.PipelineConfig(synthetic=synth).with_seed(7)
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, hidden=24, max_epochs=150, validation_fraction=0.0))
record = generate_synthetic(synth, seed=7)

# %% synchronize, split 70/30 in time, score importance, encode, train
fit = pipeline.run_offline(record, cfg)
print("epochs run", fit.history.epochs, "best epoch", fit.history.best_epoch)
print("train RMSE %.2f%% R2 %.3f" % fit.train_metrics)
print("test  RMSE %.2f%% R2 %.3f" % fit.test_metrics)

# held-out cycles are all more worn than anything seen in training, and
# one-hot bins give the network nothing to extrapolate with
prep = fit.prepared
print("train capacity range", prep.train_record.capacities.min().round(4), prep.train_record.capacities.max().round(4))
print("test capacity range ", prep.test_record.capacities.min().round(4), prep.test_record.capacities.max().round(4))

# %% the same chain with a random 70/30 split stays inside the training range
from soh_twin.importance import analyse_importance, fit_grid

order = np.sort(np.random.default_rng(0).permutation(len(record))[: int(0.7 * len(record))])
rest = np.setdiff1d(np.arange(len(record)), order)
train_rec, test_rec = record.subset(list(order)), record.subset(list(rest))
train_synced = prep.synced.select(train_rec.cycle_indices)
profile = analyse_importance(train_synced)
mixed = pipeline.Prepared(prep.synced, train_rec, test_rec, prep.synced, profile, fit_grid(train_synced, 200, profile.interval))
control = pipeline.fit_model(mixed, cfg, record.nominal_capacity)
print("random split test RMSE %.2f%% R2 %.3f" % control.test_metrics)

# %% the model file round-trips bit for bit
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.bin"
    save(fit.params, path)
    again = load(path, expected_grid_digest=prep.grid.digest())
    same = np.array_equal(predict(again, [e for e, _ in prep.test_set()]), fit.test_pred)
    print("model file", path.stat().st_size, "bytes, identical predictions:", same)
