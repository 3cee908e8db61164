"""Time-importance over synchronized cycles and one-hot grid encoding.

Importance at synchronized time ``k`` is the total across-cycle variance of
the ``(C, J)`` time slice, normalized by its maximum over ``k``.  Slices where
every cycle looks the same carry no degradation information and score near
zero.  The selection threshold is the importance at the first knee of the
cycle-averaged synchronized voltage.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from .dataset import VOLTAGE
from .errors import DegenerateDataError, InputError, KneeNotFoundError
from .warp import SyncedBattery


def _synced_array(synced) -> np.ndarray:
    arr = synced.synced if isinstance(synced, SyncedBattery) else np.asarray(synced, dtype=float)
    if arr.ndim != 3:
        raise InputError("synchronized data must be (C, J, K)")
    return arr


def importance_profile(synced) -> np.ndarray:
    arr = _synced_array(synced)
    if arr.shape[0] < 2:
        raise InputError("importance needs at least 2 cycles")
    centered = arr - arr.mean(axis=0, keepdims=True)
    trace = np.einsum("cjk,cjk->k", centered, centered)
    peak = trace.max()
    if not peak > 0:
        raise DegenerateDataError("every time slice is identical across cycles")
    return trace / peak


def chord_distance(curve) -> np.ndarray:
    """Distance of each point from the chord joining the curve's end points.

    Both axes are rescaled to ``[0, 1]`` first, as in Kneedle.
    """
    curve = np.asarray(curve, dtype=float)
    n = len(curve)
    span = curve.max() - curve.min()
    if span == 0:
        return np.zeros(n)
    x = np.linspace(0.0, 1.0, n)
    y = (curve - curve.min()) / span
    dx, dy = 1.0, y[-1] - y[0]
    return np.abs(dy * x - dx * (y - y[0])) / np.hypot(dx, dy)


def detect_knee_threshold(synced, scores, prominence=0.1):
    """Return ``(knee_index, threshold)``.

    The knee is the first peak of :func:`chord_distance` on the mean
    synchronized voltage whose prominence is at least ``prominence`` times
    the largest distance; small wiggles from noise are skipped that way.
    """
    arr = _synced_array(synced)
    scores = np.asarray(scores, dtype=float)
    if arr.shape[2] < 3:
        raise InputError("knee detection needs at least 3 time steps")
    if len(scores) != arr.shape[2]:
        raise InputError("scores length does not match the synchronized length")
    d = chord_distance(arr[:, VOLTAGE, :].mean(axis=0))
    top = d.max()
    if top < 1e-9:
        raise KneeNotFoundError("voltage curve has no knee (it is flat or linear)")
    # pad with zeros so peaks at the borders are still detected
    peaks, _ = find_peaks(np.r_[0.0, d, 0.0], prominence=prominence * top)
    knee = int(peaks[0] - 1) if len(peaks) else int(np.argmax(d))
    return knee, float(scores[knee])


def select_important(scores, threshold):
    """Maximal run of ``scores >= threshold`` around the arg-max (inclusive, 0-based)."""
    scores = np.asarray(scores, dtype=float)
    if not (0 < threshold <= 1):
        raise InputError("threshold must be in (0, 1]")
    top = int(np.argmax(scores))
    keep = scores >= threshold
    start = top
    while start > 0 and keep[start - 1]:
        start -= 1
    end = top
    while end < len(scores) - 1 and keep[end + 1]:
        end += 1
    return start, end


@dataclass(frozen=True)
class ImportanceProfile:
    scores: np.ndarray
    threshold: float
    knee_index: int
    interval: tuple

    @property
    def length(self) -> int:
        """Number of retained synchronized samples."""
        return self.interval[1] - self.interval[0] + 1

    def contains(self, k: int) -> bool:
        return self.interval[0] <= k <= self.interval[1]


def analyse_importance(synced) -> ImportanceProfile:
    scores = importance_profile(synced)
    knee, delta = detect_knee_threshold(synced, scores)
    if delta <= 0:
        # the knee sits on a zero-variance slice; keep everything with any variance
        delta = float(np.min(scores[scores > 0]))
    return ImportanceProfile(scores, delta, knee, select_important(scores, delta))


def write_importance(profile: ImportanceProfile, out_dir) -> None:
    """``importance.csv`` (``k`` 1-based) plus ``importance_meta.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".importance.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "importance"])
        for k, s in enumerate(profile.scores, start=1):
            w.writerow([k, repr(float(s))])
    os.replace(tmp, out_dir / "importance.csv")
    meta = {
        "threshold": profile.threshold,
        "knee_k": profile.knee_index + 1,
        "k_start": profile.interval[0] + 1,
        "k_end": profile.interval[1] + 1,
        "K_ID": profile.length,
    }
    tmp = out_dir / ".importance_meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1) + "\n")
    os.replace(tmp, out_dir / "importance_meta.json")


# --------------------------------------------------------------------------
# Grid encoding


@dataclass(frozen=True)
class GridSpec:
    grids_per_variable: int
    ranges: tuple  # ((vmin, vmax), ...) per variable

    def __post_init__(self):
        if self.grids_per_variable < 2:
            raise InputError("need at least 2 grids per variable")
        ranges = tuple((float(a), float(b)) for a, b in self.ranges)
        for a, b in ranges:
            if not a < b:
                raise DegenerateDataError(f"grid range ({a}, {b}) is empty")
        object.__setattr__(self, "ranges", ranges)

    @property
    def n_variables(self) -> int:
        return len(self.ranges)

    @property
    def n_rows(self) -> int:
        return self.n_variables * self.grids_per_variable

    def bins(self, values) -> np.ndarray:
        """Bin index of each value; rows of ``values`` are variables."""
        values = np.asarray(values, dtype=float)
        lo = np.array([r[0] for r in self.ranges])[:, None]
        hi = np.array([r[1] for r in self.ranges])[:, None]
        L = self.grids_per_variable
        b = np.floor((values - lo) * L / (hi - lo))
        return np.clip(b, 0, L - 1).astype(np.int64)

    def centers(self, bins) -> np.ndarray:
        bins = np.asarray(bins)
        lo = np.array([r[0] for r in self.ranges])[:, None]
        hi = np.array([r[1] for r in self.ranges])[:, None]
        return lo + (bins + 0.5) * (hi - lo) / self.grids_per_variable

    def digest(self) -> str:
        """Stable hash identifying this grid (exact float values)."""
        payload = json.dumps(
            {"L": self.grids_per_variable, "ranges": [[a.hex(), b.hex()] for a, b in self.ranges]},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self):
        return {"L": self.grids_per_variable, "ranges": [list(r) for r in self.ranges]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["L"]), tuple(tuple(r) for r in d["ranges"]))


GRID_PAD = 1e-9


def fit_grid(synced_train, L: int = 200, interval=None) -> GridSpec:
    """Per-variable value range of the training data inside ``interval``."""
    if L < 2:
        raise InputError("L must be >= 2")
    arr = _synced_array(synced_train)
    if interval is not None:
        arr = arr[:, :, interval[0] : interval[1] + 1]
    lo = arr.min(axis=(0, 2))
    hi = arr.max(axis=(0, 2))
    for j, (a, b) in enumerate(zip(lo, hi)):
        if a == b:
            raise DegenerateDataError(f"variable {j} is constant over the training data")
    return GridSpec(L, tuple(zip(lo - GRID_PAD, hi + GRID_PAD)))


@dataclass(frozen=True)
class EncodedCycle:
    """One-hot matrix of shape ``(J * L, K_ID)``.

    Rows ``j * L .. (j + 1) * L - 1`` belong to variable ``j``.
    """

    matrix: np.ndarray
    interval: tuple

    @property
    def n_steps(self) -> int:
        return self.matrix.shape[1]


def grid_encode(cycle_synced, interval, spec: GridSpec) -> EncodedCycle:
    cycle_synced = np.asarray(cycle_synced, dtype=float)
    if cycle_synced.shape[0] != spec.n_variables:
        raise InputError("cycle has a different number of variables than the grid")
    start, end = interval
    window = cycle_synced[:, start : end + 1]
    bins = spec.bins(window)
    L = spec.grids_per_variable
    n = window.shape[1]
    m = np.zeros((spec.n_rows, n))
    cols = np.arange(n)
    for j in range(spec.n_variables):
        m[j * L + bins[j], cols] = 1.0
    return EncodedCycle(m, (int(start), int(end)))


def decode(encoded: EncodedCycle, spec: GridSpec) -> np.ndarray:
    """Bin centres of an encoded cycle, shape ``(J, K_ID)``."""
    L = spec.grids_per_variable
    bins = np.stack(
        [np.argmax(encoded.matrix[j * L : (j + 1) * L], axis=0) for j in range(spec.n_variables)]
    )
    return spec.centers(bins)
