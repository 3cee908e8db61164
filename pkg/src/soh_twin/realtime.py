"""Online estimation from a partially observed discharge cycle.

At step ``k`` only the first ``k`` samples of the running cycle exist.  The
missing future is borrowed from the training cycle whose first ``k`` samples
look most alike, the patched cycle is synchronized against the training
reference, encoded with the offline grid and passed through the trained
regressor.  Nothing learned offline is changed online.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import BatteryRecord, CycleTrajectory
from .errors import GridMismatchError, InputError, MatchExhaustedError, SohTwinError
from .importance import GridSpec, grid_encode
from .regressor import ModelParameters, forward
from .warp import EdtwSettings, sync_to_reference


@dataclass(frozen=True)
class OnlinePrefix:
    """Raw samples ``(J, k)`` seen so far in the running cycle."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[1] < 1:
            raise InputError("prefix must be (J, k) with k >= 1")
        if not np.all(np.isfinite(s)):
            raise InputError("prefix contains non-finite values")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def current_step(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class ReconstructedCycle:
    samples: np.ndarray
    matched_cycle: int
    similarity: float


@dataclass(frozen=True)
class RealtimeEstimate:
    step: int  # 1-based sample count
    capacity: float
    matched_cycle: int
    in_important_interval: bool
    error: Optional[str] = None


def _as_prefix(prefix) -> OnlinePrefix:
    return prefix if isinstance(prefix, OnlinePrefix) else OnlinePrefix(prefix)


def prefix_similarity(prefix, candidate, mean=None, std=None) -> Optional[float]:
    """Euclidean distance between z-scored prefixes, or None if not comparable.

    ``mean`` and ``std`` are per-variable; leaving them out means unit scaling.
    A candidate shorter than the prefix cannot supply a future and is not
    comparable.
    """
    p = _as_prefix(prefix).samples
    c = candidate.samples if isinstance(candidate, CycleTrajectory) else np.asarray(candidate, float)
    if c.ndim == 1:
        c = c[None, :]
    if c.shape[0] != p.shape[0]:
        raise InputError("prefix and candidate have different numbers of variables")
    k = p.shape[1]
    if c.shape[1] < k:
        return None
    mean = np.zeros(p.shape[0]) if mean is None else np.asarray(mean, float)
    std = np.ones(p.shape[0]) if std is None else np.asarray(std, float)
    diff = (p - mean[:, None]) / std[:, None] - (c[:, :k] - mean[:, None]) / std[:, None]
    return float(np.sqrt(np.sum(diff * diff)))


def variable_scale(record: BatteryRecord):
    """Per-variable mean and std over every sample of ``record``."""
    allv = np.concatenate([c.samples for c in record.cycles], axis=1)
    mean = allv.mean(axis=1)
    std = allv.std(axis=1)
    std[std == 0] = 1.0
    return mean, std


class _Candidates:
    """Training cycles z-scored and padded into one array for fast matching."""

    def __init__(self, record: BatteryRecord, mean, std):
        if len(record) == 0:
            raise InputError("training record is empty")
        self.mean = np.asarray(mean, float)
        self.std = np.asarray(std, float)
        self.lengths = record.lengths
        self.indices = record.cycle_indices
        self.raw = [c.samples for c in record.cycles]
        j = record.cycles[0].samples.shape[0]
        z = np.full((len(record), j, int(self.lengths.max())), np.nan)
        for i, cyc in enumerate(record.cycles):
            z[i, :, : cyc.length] = (cyc.samples - self.mean[:, None]) / self.std[:, None]
        self.z = z

    def distances(self, prefix: np.ndarray) -> np.ndarray:
        """Similarity to every candidate; ``inf`` marks not comparable."""
        k = prefix.shape[1]
        out = np.full(len(self.lengths), np.inf)
        ok = self.lengths >= k
        if not ok.any():
            return out
        zp = (prefix - self.mean[:, None]) / self.std[:, None]
        diff = zp[None] - self.z[ok, :, :k]
        out[ok] = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
        return out


def match_and_reconstruct(prefix, training, mean=None, std=None) -> ReconstructedCycle:
    """Complete ``prefix`` with the future of the most similar training cycle.

    ``training`` is a :class:`BatteryRecord` or a prepared candidate set.
    Ties go to the lower cycle index.
    """
    p = _as_prefix(prefix).samples
    if isinstance(training, _Candidates):
        cands = training
    else:
        if mean is None:
            mean, std = np.zeros(p.shape[0]), np.ones(p.shape[0])
        cands = _Candidates(training, mean, std)
    if cands.z.shape[1] != p.shape[0]:
        raise InputError("prefix and training cycles have different numbers of variables")
    d = cands.distances(p)
    if not np.isfinite(d).any():
        raise MatchExhaustedError(
            f"prefix of {p.shape[1]} samples is longer than every training cycle"
        )
    best = d.min()
    # lowest cycle index among the minimisers
    pos = min(np.flatnonzero(d == best), key=lambda i: cands.indices[i])
    future = cands.raw[pos][:, p.shape[1] :]
    return ReconstructedCycle(np.concatenate([p, future], axis=1), int(cands.indices[pos]), float(best))


class OnlineSession:
    """Frozen snapshot of everything fitted offline.

    ``training`` supplies the futures, ``reference`` fixes the synchronized
    time axis, and ``params`` carries the grid and important interval it was
    trained with.
    """

    def __init__(
        self,
        training: BatteryRecord,
        reference,
        params: ModelParameters,
        grid: GridSpec,
        settings: EdtwSettings = EdtwSettings(),
    ):
        if grid.digest() != params.grid_digest:
            raise GridMismatchError("grid does not match the one the model was trained with")
        self.training = training
        self.reference = np.array(reference, dtype=np.float64)
        self.reference.setflags(write=False)
        self.params = params
        self.grid = grid
        self.settings = settings
        self.interval = tuple(params.interval)
        self.mean, self.std = variable_scale(training)
        self._cands = _Candidates(training, self.mean, self.std)

    def in_interval(self, step: int) -> bool:
        return self.interval[0] <= step - 1 <= self.interval[1]

    def reconstruct(self, prefix) -> ReconstructedCycle:
        return match_and_reconstruct(prefix, self._cands)


def estimate_from_samples(samples, session: OnlineSession) -> float:
    """Synchronize, encode and regress one complete cycle."""
    synced, _ = sync_to_reference(session.reference, samples, session.settings)
    enc = grid_encode(synced, session.interval, session.grid)
    return forward(session.params, enc)


def estimate_at(prefix, session: OnlineSession) -> RealtimeEstimate:
    prefix = _as_prefix(prefix)
    k = prefix.current_step
    rec = session.reconstruct(prefix)
    try:
        cap = estimate_from_samples(rec.samples, session)
    except SohTwinError as exc:
        raise type(exc)(f"step {k}: {exc}") from exc
    return RealtimeEstimate(k, cap, rec.matched_cycle, session.in_interval(k))


def stream_cycle(cycle, session: OnlineSession) -> list:
    """One estimate per sample of ``cycle``; failures are kept in line."""
    samples = cycle.samples if isinstance(cycle, CycleTrajectory) else np.asarray(cycle, float)
    out = []
    for k in range(1, samples.shape[1] + 1):
        try:
            out.append(estimate_at(samples[:, :k], session))
        except SohTwinError as exc:
            out.append(RealtimeEstimate(k, float("nan"), -1, session.in_interval(k), str(exc)))
    return out


STREAM_HEADER = ["k", "estimate_ah", "matched_cycle", "in_important_interval"]


def write_stream(estimates, path, truth: Optional[float] = None, cycle_index=None) -> None:
    """Per-step CSV followed by one ``#`` summary line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name("." + path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STREAM_HEADER)
        for e in estimates:
            w.writerow([e.step, repr(float(e.capacity)), e.matched_cycle, int(e.in_important_interval)])
        parts = []
        if cycle_index is not None:
            parts.append(f"cycle={cycle_index}")
        parts.append(f"steps={len(estimates)}")
        parts.append(f"failed_steps={sum(e.error is not None for e in estimates)}")
        if estimates:
            parts.append(f"final_estimate_ah={float(estimates[-1].capacity)!r}")
        if truth is not None:
            parts.append(f"truth_ah={float(truth)!r}")
        fh.write("# " + " ".join(parts) + "\n")
    os.replace(tmp, path)


def read_stream(path):
    """Rows of a stream CSV as ``(k, estimate, matched, flag)`` plus the summary dict."""
    rows, summary = [], {}
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                summary = dict(item.split("=", 1) for item in line[1:].split())
    with open(path, newline="") as fh:
        reader = csv.reader(l for l in fh if not l.startswith("#"))
        header = next(reader)
        if header != STREAM_HEADER:
            raise InputError(f"{path}: unexpected header {header}")
        for r in reader:
            rows.append((int(r[0]), float(r[1]), int(r[2]), bool(int(r[3]))))
    return rows, summary


def error_by_step(streams, truths) -> np.ndarray:
    """Mean absolute error per step across streams, shape ``(max_K,)``.

    Streams are ragged; each step averages over the streams that reach it.
    """
    if len(streams) != len(truths):
        raise InputError("need one truth per stream")
    n = max(len(s) for s in streams)
    total = np.zeros(n)
    count = np.zeros(n)
    for est, truth in zip(streams, truths):
        caps = np.array([e.capacity for e in est])
        ok = np.isfinite(caps)
        idx = np.flatnonzero(ok)
        total[idx] += np.abs(caps[ok] - truth)
        count[idx] += 1
    with np.errstate(invalid="ignore"):
        return total / count
