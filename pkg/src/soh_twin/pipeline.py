"""Offline fitting end to end, shared by the command line, tests and demos.

The chain is: synchronize every cycle to the first training cycle, split
chronologically, score time importance on the training cycles only, fit the
grid on the training values inside the important interval, encode, train,
and evaluate on the held-out cycles.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import BatteryRecord, SplitSpec, SyntheticConfig, split
from .errors import ConfigError, SplitError
from .importance import GridSpec, ImportanceProfile, analyse_importance, fit_grid, grid_encode
from .realtime import OnlineSession
from .regressor import ModelParameters, TrainConfig, TrainHistory, metrics, predict, train
from .warp import EdtwSettings, SyncedBattery, synchronize_battery


@dataclass(frozen=True)
class PipelineConfig:
    cycles: Optional[str] = None
    labels: Optional[str] = None
    test_cycles: Optional[str] = None
    test_labels: Optional[str] = None
    out_dir: str = "out"
    battery_id: Optional[str] = None
    nominal_capacity: float = 1.1
    ref_cycle: Optional[int] = None
    grids_per_variable: int = 200
    seed: int = 0
    edtw: EdtwSettings = field(default_factory=EdtwSettings)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


# Flat config keys.  Nested settings are addressed with a prefix, for
# example ``train.learning_rate`` or ``synth.n_cycles``.
_TOP_KEYS = {
    "cycles": str,
    "labels": str,
    "test_cycles": str,
    "test_labels": str,
    "out_dir": str,
    "battery_id": str,
    "nominal_capacity": float,
    "ref_cycle": int,
    "grids_per_variable": int,
    "seed": int,
}
_NESTED = {"edtw": ("edtw", EdtwSettings), "split": ("split", SplitSpec),
           "train": ("train", TrainConfig), "synth": ("synthetic", SyntheticConfig)}


def _convert(text: str, kind, key):
    text = text.strip()
    if text.lower() in ("", "none"):
        return None
    try:
        if kind is bool:
            return text.lower() in ("1", "true", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r}") from None


def _field_kind(cls, name):
    default = next(f for f in dataclasses.fields(cls) if f.name == name).default
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    # optional fields default to None; all of them are integers
    return int


def config_from_mapping(values: dict, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    top, nested = {}, {k: {} for k in _NESTED}
    for key, raw in values.items():
        if "." in key:
            prefix, name = key.split(".", 1)
            if prefix not in _NESTED:
                raise ConfigError(f"unknown config key {key!r}")
            attr, cls = _NESTED[prefix]
            if name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config key {key!r}")
            nested[prefix][name] = raw if not isinstance(raw, str) else _convert(raw, _field_kind(cls, name), key)
        elif key in _TOP_KEYS:
            top[key] = raw if not isinstance(raw, str) else _convert(raw, _TOP_KEYS[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for prefix, changes in nested.items():
        if changes:
            attr, _ = _NESTED[prefix]
            try:
                top[attr] = dataclasses.replace(getattr(base, attr), **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{prefix}: {exc}") from None
    cfg = dataclasses.replace(base, **top)
    if "seed" in top:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_string("[config]\n" + fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["config"])


# --------------------------------------------------------------------------


@dataclass
class Prepared:
    """Everything that comes before training."""

    synced: SyncedBattery
    train_record: BatteryRecord
    test_record: BatteryRecord
    test_synced: SyncedBattery
    profile: ImportanceProfile
    grid: GridSpec

    @property
    def interval(self):
        return self.profile.interval

    def encode(self, synced: SyncedBattery, record: BatteryRecord):
        return [grid_encode(synced.cycle(c), self.interval, self.grid) for c in record.cycle_indices]

    def train_set(self):
        return list(zip(self.encode(self.synced, self.train_record), self.train_record.capacities))

    def test_set(self):
        return list(zip(self.encode(self.test_synced, self.test_record), self.test_record.capacities))


def synchronize(record: BatteryRecord, config: PipelineConfig) -> SyncedBattery:
    return synchronize_battery(record, config.ref_cycle, config.edtw)


def prepare(
    record: BatteryRecord,
    synced: SyncedBattery,
    config: PipelineConfig,
    test_record: Optional[BatteryRecord] = None,
    test_synced: Optional[SyncedBattery] = None,
) -> Prepared:
    """Split, score importance on the training cycles and fit the grid.

    Without a separate test battery the chronological remainder of
    ``record`` is the test set.  With one, all of its cycles from the
    degradation start onward are tested.
    """
    train_rec, own_test = split(record, config.split)
    if test_record is None:
        test_rec, test_sync = own_test, synced
    else:
        keep = [i for i, c in enumerate(test_record.cycle_indices) if c >= config.split.degradation_start_cycle]
        if not keep:
            raise SplitError("test battery has no cycles after the degradation start")
        test_rec = test_record.subset(keep)
        test_sync = test_synced
    train_synced = synced.select(train_rec.cycle_indices)
    profile = analyse_importance(train_synced)
    grid = fit_grid(train_synced, config.grids_per_variable, profile.interval)
    return Prepared(synced, train_rec, test_rec, test_sync, profile, grid)


@dataclass
class OfflineFit:
    prepared: Prepared
    params: ModelParameters
    history: TrainHistory
    train_pred: np.ndarray
    test_pred: np.ndarray
    train_metrics: tuple
    test_metrics: tuple


def fit_model(prepared: Prepared, config: PipelineConfig, nominal_capacity: float) -> OfflineFit:
    train_set = prepared.train_set()
    params, history = train(
        train_set,
        config.train,
        interval=prepared.interval,
        grid=prepared.grid.to_dict(),
        grid_digest=prepared.grid.digest(),
        nominal_capacity=nominal_capacity,
    )
    return score(prepared, params, history, nominal_capacity, train_set)


def score(prepared, params, history, nominal_capacity, train_set=None) -> OfflineFit:
    train_set = prepared.train_set() if train_set is None else train_set
    test_set = prepared.test_set()
    tr_pred = predict(params, [e for e, _ in train_set])
    te_pred = predict(params, [e for e, _ in test_set])
    tr_m = metrics(tr_pred, prepared.train_record.capacities, nominal_capacity)
    te_m = metrics(te_pred, prepared.test_record.capacities, nominal_capacity)
    return OfflineFit(prepared, params, history, tr_pred, te_pred, tr_m, te_m)


def run_offline(record: BatteryRecord, config: PipelineConfig, test_record: Optional[BatteryRecord] = None):
    """Synchronize, prepare and train in one call."""
    synced = synchronize(record, config)
    test_synced = None
    if test_record is not None:
        ref = record.cycle(synced_ref_cycle(record, config)).samples
        test_synced = synchronize_battery(test_record, None, config.edtw, reference=ref)
    prepared = prepare(record, synced, config, test_record, test_synced)
    return fit_model(prepared, config, record.nominal_capacity)


def synced_ref_cycle(record: BatteryRecord, config: PipelineConfig) -> int:
    return record.cycles[0].cycle_index if config.ref_cycle is None else config.ref_cycle


def make_session(record: BatteryRecord, train_record: BatteryRecord, params, grid, config) -> OnlineSession:
    """Online session whose reference and settings match the offline fit."""
    ref = record.cycle(synced_ref_cycle(record, config)).samples
    return OnlineSession(train_record, ref, params, grid, config.edtw)
