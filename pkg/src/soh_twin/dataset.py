"""Cycling data containers, CSV exchange, synthetic degradation data and splits.

Every cycle is stored as a ``(J, K)`` array with a fixed variable order:
row 0 is terminal voltage (V), row 1 is cell temperature (degC).  The
discharge current is constant in the data this package targets and is not
a model input.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    CyclesNotFoundError,
    LabelsNotFoundError,
    MissingLabelError,
    ParseError,
    SplitError,
)

VOLTAGE = 0
TEMPERATURE = 1
VARIABLES = ("voltage", "temperature")
N_VARIABLES = len(VARIABLES)

CYCLES_HEADER = ["cycle", "t", "voltage", "temperature"]
LABELS_HEADER = ["cycle", "capacity_ah"]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CycleTrajectory:
    """One discharge cycle.

    ``samples`` has shape ``(J, K)``; ``sample_period`` is kept for reference
    only, all algorithms work on step indices.
    """

    cycle_index: int
    samples: np.ndarray
    sample_period: float = 1.0

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim != 2 or samples.shape[0] != N_VARIABLES:
            raise ParseError(
                f"cycle {self.cycle_index}: samples must have shape "
                f"({N_VARIABLES}, K), got {samples.shape}"
            )
        if samples.shape[1] < 2:
            raise ParseError(f"cycle {self.cycle_index}: needs at least 2 samples")
        if not np.all(np.isfinite(samples)):
            raise ParseError(f"cycle {self.cycle_index}: non-finite sample")
        if int(self.cycle_index) < 1:
            raise ParseError(f"cycle index must be positive, got {self.cycle_index}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "cycle_index", int(self.cycle_index))

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def voltage(self) -> np.ndarray:
        return self.samples[VOLTAGE]

    @property
    def temperature(self) -> np.ndarray:
        return self.samples[TEMPERATURE]


@dataclass(frozen=True)
class BatteryRecord:
    battery_id: str
    cycles: tuple
    capacities: np.ndarray
    nominal_capacity: float = 1.1

    def __post_init__(self):
        cycles = tuple(self.cycles)
        capacities = _frozen(self.capacities)
        if len(cycles) != capacities.shape[0]:
            raise ParseError(
                f"{len(cycles)} cycles but {capacities.shape[0]} capacities"
            )
        idx = [c.cycle_index for c in cycles]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ParseError("cycle indices must be strictly increasing")
        if not (self.nominal_capacity > 0):
            raise ParseError("nominal capacity must be positive")
        bad = ~((capacities > 0) & (capacities < 2 * self.nominal_capacity))
        if np.any(bad):
            c = idx[int(np.argmax(bad))]
            raise ParseError(f"capacity of cycle {c} outside (0, 2*nominal)")
        object.__setattr__(self, "cycles", cycles)
        object.__setattr__(self, "capacities", capacities)

    def __len__(self):
        return len(self.cycles)

    @property
    def cycle_indices(self) -> np.ndarray:
        return np.array([c.cycle_index for c in self.cycles], dtype=int)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([c.length for c in self.cycles], dtype=int)

    def position(self, cycle_index: int) -> int:
        """Position of ``cycle_index`` in :attr:`cycles`."""
        for i, c in enumerate(self.cycles):
            if c.cycle_index == cycle_index:
                return i
        raise KeyError(f"no cycle {cycle_index} in battery {self.battery_id}")

    def cycle(self, cycle_index: int) -> CycleTrajectory:
        return self.cycles[self.position(cycle_index)]

    def capacity(self, cycle_index: int) -> float:
        return float(self.capacities[self.position(cycle_index)])

    def subset(self, positions: Sequence[int]) -> "BatteryRecord":
        positions = list(positions)
        return BatteryRecord(
            self.battery_id,
            tuple(self.cycles[i] for i in positions),
            self.capacities[positions],
            self.nominal_capacity,
        )


# --------------------------------------------------------------------------
# CSV exchange


def _float(text, path, row, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"{path}: row {row}: bad {column} value {text!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"{path}: row {row}: non-finite {column} value {text!r}")
    return v


def _int(text, path, row, column):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}: row {row}: bad {column} value {text!r}") from None


def _check_header(header, expected, path):
    if header is None or [h.strip() for h in header] != expected:
        raise ParseError(f"{path}: expected header {','.join(expected)}, got {header}")


def parse_battery(
    csv_cycles,
    csv_labels,
    battery_id: Optional[str] = None,
    nominal_capacity: float = 1.1,
) -> BatteryRecord:
    """Read a cycles CSV and its capacity labels into a :class:`BatteryRecord`.

    Row numbers in error messages count the header as row 1.
    """
    csv_cycles, csv_labels = Path(csv_cycles), Path(csv_labels)
    if not csv_cycles.is_file():
        raise CyclesNotFoundError(f"cycles file not found: {csv_cycles}")
    if not csv_labels.is_file():
        raise LabelsNotFoundError(f"labels file not found: {csv_labels}")
    labels = {}
    with open(csv_labels, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), LABELS_HEADER, csv_labels)
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{csv_labels}: row {row_no}: expected 2 fields")
            c = _int(row[0], csv_labels, row_no, "cycle")
            labels[c] = _float(row[1], csv_labels, row_no, "capacity_ah")

    grouped = {}
    order = []
    with open(csv_cycles, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), CYCLES_HEADER, csv_cycles)
        last_cycle, last_t = None, None
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{csv_cycles}: row {row_no}: expected 4 fields")
            c = _int(row[0], csv_cycles, row_no, "cycle")
            t = _float(row[1], csv_cycles, row_no, "t")
            v = _float(row[2], csv_cycles, row_no, "voltage")
            temp = _float(row[3], csv_cycles, row_no, "temperature")
            if c != last_cycle:
                if c in grouped:
                    raise ParseError(
                        f"{csv_cycles}: row {row_no}: rows of cycle {c} are not contiguous"
                    )
                grouped[c] = ([], [], [])
                order.append(c)
                last_t = None
            elif t <= last_t:
                raise ParseError(
                    f"{csv_cycles}: row {row_no}: time not increasing within cycle {c}"
                )
            ts, vs, temps = grouped[c]
            ts.append(t)
            vs.append(v)
            temps.append(temp)
            last_cycle, last_t = c, t

    order.sort()
    cycles, caps = [], []
    for c in order:
        if c not in labels:
            raise MissingLabelError(f"missing capacity for cycle {c}")
        ts, vs, temps = grouped[c]
        period = (ts[-1] - ts[0]) / (len(ts) - 1) if len(ts) > 1 else 1.0
        cycles.append(CycleTrajectory(c, np.array([vs, temps]), period))
        caps.append(labels[c])
    if battery_id is None:
        battery_id = csv_cycles.stem
    return BatteryRecord(battery_id, tuple(cycles), np.array(caps), nominal_capacity)


def _atomic_writer(path):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    return tmp, path


def write_battery(record: BatteryRecord, csv_cycles, csv_labels) -> None:
    """Write ``record`` in the exchange format read by :func:`parse_battery`.

    Floats use the shortest repr that round-trips, so a parse of the written
    files reproduces every sample bitwise.
    """
    tmp, dest = _atomic_writer(csv_cycles)
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CYCLES_HEADER)
        for cyc in record.cycles:
            for k in range(cyc.length):
                w.writerow(
                    [
                        cyc.cycle_index,
                        repr(k * cyc.sample_period),
                        repr(float(cyc.samples[VOLTAGE, k])),
                        repr(float(cyc.samples[TEMPERATURE, k])),
                    ]
                )
    os.replace(tmp, dest)

    tmp, dest = _atomic_writer(csv_labels)
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for cyc, cap in zip(record.cycles, record.capacities):
            w.writerow([cyc.cycle_index, repr(float(cap))])
    os.replace(tmp, dest)


# --------------------------------------------------------------------------
# Synthetic degradation data


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic battery.

    Capacity follows ``nominal * (1 - fade * (c / n_cycles) ** fade_exponent)``
    and the discharge length shrinks in proportion to capacity.  Degradation
    also steepens the voltage plateau and raises the temperature bump, which
    is what makes capacity recoverable from the synchronized curves.
    """

    n_cycles: int = 200
    base_length: int = 300
    nominal_capacity: float = 1.1
    fade: float = 0.35
    fade_exponent: float = 2.0
    voltage_noise: float = 0.002
    temperature_noise: float = 0.05
    v_start: float = 3.6
    v_cutoff: float = 2.0
    initial_drop: float = 0.3
    drop_scale: float = 0.13
    plateau_slope: float = 0.15
    plateau_slope_gain: float = 0.6
    ambient: float = 30.0
    heat_rise: float = 4.0
    heat_rise_gain: float = 12.0
    sample_period: float = 10.0

    def validate(self):
        if self.n_cycles < 10:
            raise ConfigError("n_cycles must be >= 10")
        if self.base_length < 50:
            raise ConfigError("base_length must be >= 50")
        if not (0 < self.fade < 1):
            raise ConfigError("fade must be in (0, 1)")
        if self.fade_exponent <= 0:
            raise ConfigError("fade_exponent must be positive")
        if self.voltage_noise < 0 or self.temperature_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.nominal_capacity <= 0:
            raise ConfigError("nominal_capacity must be positive")
        if not (self.v_start > self.v_cutoff):
            raise ConfigError("v_start must exceed v_cutoff")
        room = self.v_start - self.v_cutoff - self.initial_drop
        if room - self.plateau_slope - self.plateau_slope_gain * self.fade <= 0:
            raise ConfigError("voltage profile leaves no room for the end-of-discharge tail")

    def capacity(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        return self.nominal_capacity * (
            1.0 - self.fade * (c / self.n_cycles) ** self.fade_exponent
        )


def _voltage_profile(s, fade_fraction, cfg: SyntheticConfig):
    slope = cfg.plateau_slope + cfg.plateau_slope_gain * fade_fraction
    tail = cfg.v_start - cfg.v_cutoff - cfg.initial_drop - slope
    return (
        cfg.v_start
        - cfg.initial_drop * (1.0 - np.exp(-s / cfg.drop_scale)) / (1.0 - math.exp(-1 / cfg.drop_scale))
        - slope * s
        - tail * s**12
    )


def _temperature_profile(s, fade_fraction, cfg: SyntheticConfig):
    rise = cfg.heat_rise + cfg.heat_rise_gain * fade_fraction
    return cfg.ambient + rise * np.sin(np.pi * s)


def generate_synthetic(config: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> BatteryRecord:
    """Deterministic synthetic battery mimicking capacity fade over cycles.

    Noise is uniform (bounded) with half-widths ``voltage_noise`` and
    ``temperature_noise``.  With zero noise every voltage curve is strictly
    decreasing.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    idx = np.arange(1, config.n_cycles + 1)
    caps = config.capacity(idx)
    lengths = np.maximum(2, np.round(config.base_length * caps / caps[0]).astype(int))
    cycles = []
    for c, cap, K in zip(idx, caps, lengths):
        f = 1.0 - cap / config.nominal_capacity
        s = np.linspace(0.0, 1.0, K)
        v = _voltage_profile(s, f, config)
        t = _temperature_profile(s, f, config)
        v = v + rng.uniform(-config.voltage_noise, config.voltage_noise, K)
        t = t + rng.uniform(-config.temperature_noise, config.temperature_noise, K)
        cycles.append(CycleTrajectory(int(c), np.vstack([v, t]), config.sample_period))
    return BatteryRecord(f"synthetic-{seed}", tuple(cycles), caps, config.nominal_capacity)


# --------------------------------------------------------------------------
# Train/test split


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split.

    Cycles with index below ``degradation_start_cycle`` are dropped.  Of the
    rest, the first ``floor(train_fraction * n)`` go to training unless
    ``train_end_cycle`` pins the last training cycle explicitly.
    """

    degradation_start_cycle: int = 1
    train_fraction: float = 0.7
    train_end_cycle: Optional[int] = None

    def __post_init__(self):
        if not (0 < self.train_fraction < 1):
            raise SplitError("train_fraction must be in (0, 1)")


def split(record: BatteryRecord, spec: SplitSpec):
    """Return ``(train, test)`` records; see :class:`SplitSpec`."""
    idx = record.cycle_indices
    if len(idx) == 0 or spec.degradation_start_cycle > idx[-1]:
        raise SplitError("degradation_start_cycle beyond the last cycle")
    keep = np.flatnonzero(idx >= spec.degradation_start_cycle)
    if spec.train_end_cycle is not None:
        n_train = int(np.sum(idx[keep] <= spec.train_end_cycle))
    else:
        n_train = int(math.floor(spec.train_fraction * len(keep)))
    train_pos, test_pos = keep[:n_train], keep[n_train:]
    if len(train_pos) == 0:
        raise SplitError("empty train split")
    if len(test_pos) == 0:
        raise SplitError("empty test split")
    return record.subset(train_pos), record.subset(test_pos)
