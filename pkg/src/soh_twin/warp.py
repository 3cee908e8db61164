"""Cycle synchronization: plain DTW and energy-discrepancy-aware time warping.

Sequences are ``(J, K)`` arrays (variables by time).  A warp path is a pair of
0-based index arrays into the reference and target sequences.  Spatial
projections ``V`` are ``(J, M)`` and act as ``V.T @ X``.

The alternating solver follows canonical time warping: a DTW pass on the
projected sequences fixes the temporal warp, then a canonical correlation
step recomputes both projections on the warped data.  The objective adds a
penalty on the change of second-moment energy caused by warping, so that an
alignment which duplicates or drops large parts of a cycle costs more.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _dtw
from .dataset import N_VARIABLES, VARIABLES, BatteryRecord
from .errors import AlignmentError, InputError, ParseError


@dataclass(frozen=True)
class WarpPath:
    """Monotone, continuous alignment path with 0-based indices."""

    ref: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ref", np.asarray(self.ref, dtype=np.int64))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.int64))

    def __len__(self):
        return len(self.ref)

    @property
    def n_ref(self) -> int:
        return int(self.ref[-1]) + 1

    @property
    def n_target(self) -> int:
        return int(self.target[-1]) + 1

    def pairs(self):
        return list(zip(self.ref.tolist(), self.target.tolist()))

    def is_valid(self, n_ref=None, n_target=None) -> bool:
        if len(self.ref) == 0 or len(self.ref) != len(self.target):
            return False
        if self.ref[0] != 0 or self.target[0] != 0:
            return False
        if n_ref is not None and self.ref[-1] != n_ref - 1:
            return False
        if n_target is not None and self.target[-1] != n_target - 1:
            return False
        dr, dt = np.diff(self.ref), np.diff(self.target)
        return bool(
            np.all((dr >= 0) & (dr <= 1) & (dt >= 0) & (dt <= 1) & (dr + dt >= 1))
        )

    def indicator_matrices(self):
        """Return ``(W_ref, W_target)`` with shapes ``(m, K_ref)`` and ``(m, K_target)``."""
        m = len(self)
        w_r = np.zeros((m, self.n_ref))
        w_t = np.zeros((m, self.n_target))
        w_r[np.arange(m), self.ref] = 1.0
        w_t[np.arange(m), self.target] = 1.0
        return w_r, w_t


def _as_sequence(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] == 0:
        raise InputError(f"{name} must be a non-empty (J, K) array")
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} contains non-finite values")
    return x


def _sq_distances(a, b):
    # pairwise squared Euclidean distances between columns of a and b
    d = a[:, :, None] - b[:, None, :]
    return np.einsum("jkl,jkl->kl", d, d)


def dtw_from_cost(cost):
    """Optimal path through a ``(K_ref, K_target)`` local cost matrix."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    acc = _dtw.accumulate(cost)
    ri, ti = _dtw.backtrack(acc)
    return WarpPath(ri, ti), float(acc[-1, -1])


def dtw_align(ref_seq, target_seq):
    """Classic DTW with Euclidean local distance.

    Returns the path and the summed distance along it.  1-D inputs are
    treated as single-variable sequences.
    """
    ref_seq = _as_sequence(ref_seq, "ref_seq")
    target_seq = _as_sequence(target_seq, "target_seq")
    if ref_seq.shape[0] != target_seq.shape[0]:
        raise InputError("sequences must have the same number of variables")
    cost = np.sqrt(_sq_distances(ref_seq, target_seq))
    return dtw_from_cost(cost)


# --------------------------------------------------------------------------
# EDTW


@dataclass(frozen=True)
class EdtwSettings:
    n_components: Optional[int] = None  # None means all J variables
    tol: float = 0.01
    max_iter: int = 50
    energy_weight: float = 1.0
    regularization: float = 1e-6

    def validate(self, n_vars):
        m = n_vars if self.n_components is None else self.n_components
        if not (1 <= m <= n_vars):
            raise InputError(f"n_components must be in [1, {n_vars}], got {m}")
        if not self.tol > 0:
            raise InputError("tol must be positive")
        if self.max_iter < 1:
            raise InputError("max_iter must be >= 1")
        if self.energy_weight < 0:
            raise InputError("energy_weight must be >= 0")
        return m


@dataclass(frozen=True)
class EdtwSolution:
    path: WarpPath
    v_ref: np.ndarray
    v_target: np.ndarray
    objective_trace: np.ndarray
    converged: bool
    iterations_used: int
    alignment_term: float
    energy_term: float

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])


def second_moment_energy(x) -> float:
    """Frobenius norm of the time-averaged variable Gram matrix ``X X^T / K``."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.linalg.norm(x @ x.T / x.shape[1]))


def relative_energy_error(original, synced) -> float:
    e0 = second_moment_energy(original)
    if e0 == 0:
        return 0.0 if second_moment_energy(synced) == 0 else np.inf
    return abs(second_moment_energy(synced) - e0) / e0


def _inv_sqrt(sym, what):
    w, u = np.linalg.eigh(sym)
    if not np.all(np.isfinite(w)) or w.min() <= 0:
        raise AlignmentError(f"singular warped Gram matrix ({what})")
    return (u / np.sqrt(w)) @ u.T


def _cca_step(ar, at, m, reg, label):
    """Top-``m`` canonical directions of two centered, equally long sequences.

    The returned projections satisfy ``V.T @ A @ A.T @ V = I`` on the
    unregularized Gram matrix whenever it is non-singular.
    """
    c_rr = ar @ ar.T
    c_tt = at @ at.T
    c_rt = ar @ at.T
    tr_r, tr_t = np.trace(c_rr), np.trace(c_tt)
    if not (tr_r > 0 and tr_t > 0):
        raise AlignmentError(f"singular warped Gram matrix for {label}: zero variance")
    j = ar.shape[0]
    eye = np.eye(j)
    isq_r = _inv_sqrt(c_rr + reg * tr_r * eye, f"reference of {label}")
    isq_t = _inv_sqrt(c_tt + reg * tr_t * eye, f"target of {label}")
    u, _, vh = np.linalg.svd(isq_r @ c_rt @ isq_t)
    v_r = isq_r @ u[:, :m]
    v_t = isq_t @ vh.T[:, :m]
    v_r = _renormalize(v_r, c_rr)
    v_t = _renormalize(v_t, c_tt)
    return v_r, v_t


def _renormalize(v, gram):
    g = v.T @ gram @ v
    w, u = np.linalg.eigh(g)
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        return v
    return v @ ((u / np.sqrt(w)) @ u.T)


def edtw_objective(ref_seq, target_seq, path: WarpPath, v_ref, v_target, energy_weight=1.0):
    """Objective value split into ``(alignment, energy)`` terms.

    ``alignment`` is the squared Frobenius distance between the projected,
    warped and centered sequences.  ``energy`` is ``energy_weight`` times the
    sum over both sequences of the squared relative change in
    :func:`second_moment_energy` caused by the warp.
    """
    yr = ref_seq[:, path.ref]
    yt = target_seq[:, path.target]
    ar = yr - yr.mean(axis=1, keepdims=True)
    at = yt - yt.mean(axis=1, keepdims=True)
    diff = v_ref.T @ ar - v_target.T @ at
    align = float(np.sum(diff * diff))
    energy = 0.0
    for orig, warped in ((ref_seq, yr), (target_seq, yt)):
        energy += relative_energy_error(orig, warped) ** 2
    return align, energy_weight * energy


def edtw_solve(ref_seq, target_seq, settings: EdtwSettings = EdtwSettings(), label="pair"):
    """Align ``target_seq`` to ``ref_seq`` by alternating DTW and CCA steps.

    Each iteration runs DTW on the centered sequences projected by the
    current ``V`` matrices (squared Euclidean local cost), recomputes both
    projections by CCA on the warped sequences and evaluates the objective.
    An iteration that would raise the objective is discarded and the solver
    stops, so ``objective_trace`` never increases.  Convergence means the
    objective fell below ``tol`` or changed by less than ``tol``.

    The first pass projects both sequences with the reference's per-variable
    inverse standard deviation so that volts and degrees are comparable.
    """
    ref_seq = _as_sequence(ref_seq, "ref_seq")
    target_seq = _as_sequence(target_seq, "target_seq")
    j = ref_seq.shape[0]
    if target_seq.shape[0] != j:
        raise InputError("sequences must have the same number of variables")
    m = settings.validate(j)

    std = ref_seq.std(axis=1)
    std[std == 0] = 1.0
    v_r = v_t = np.eye(j)[:, :m] / std[:, None]
    cr = ref_seq - ref_seq.mean(axis=1, keepdims=True)
    ct = target_seq - target_seq.mean(axis=1, keepdims=True)

    trace = []
    best = None
    converged = False
    it = 0
    for it in range(1, settings.max_iter + 1):
        cost = _sq_distances(v_r.T @ cr, v_t.T @ ct)
        path, _ = dtw_from_cost(cost)
        new_r, new_t = _cca_step(
            ref_seq[:, path.ref] - ref_seq[:, path.ref].mean(axis=1, keepdims=True),
            target_seq[:, path.target] - target_seq[:, path.target].mean(axis=1, keepdims=True),
            m,
            settings.regularization,
            label,
        )
        align, energy = edtw_objective(
            ref_seq, target_seq, path, new_r, new_t, settings.energy_weight
        )
        pi = align + energy
        if not np.isfinite(pi):
            raise AlignmentError(f"non-finite objective for {label}")
        if trace and pi > trace[-1]:
            converged = True
            break
        previous = trace[-1] if trace else None
        trace.append(pi)
        best = (path, new_r, new_t, align, energy)
        v_r, v_t = new_r, new_t
        if pi < settings.tol or (previous is not None and previous - pi < settings.tol):
            converged = True
            break

    path, v_r, v_t, align, energy = best
    return EdtwSolution(
        path=path,
        v_ref=v_r,
        v_target=v_t,
        objective_trace=np.array(trace),
        converged=converged,
        iterations_used=it,
        alignment_term=align,
        energy_term=energy,
    )


def synchronize_cycle(solution, target_seq, n_ref: int) -> np.ndarray:
    """Resample ``target_seq`` onto the reference time axis.

    Column ``k`` of the result is the mean of the target columns paired with
    reference index ``k``.  ``solution`` may be an :class:`EdtwSolution` or a
    bare :class:`WarpPath`.
    """
    path = solution.path if isinstance(solution, EdtwSolution) else solution
    target_seq = np.asarray(target_seq, dtype=np.float64)
    if target_seq.ndim == 1:
        target_seq = target_seq[None, :]
    if len(path) == 0 or path.ref[-1] != n_ref - 1 or path.target[-1] != target_seq.shape[1] - 1:
        raise AlignmentError("warp path does not span the reference and target")
    counts = np.bincount(path.ref, minlength=n_ref)
    if np.any(counts == 0) or len(counts) != n_ref:
        raise AlignmentError("warp path does not cover every reference index")
    out = np.empty((target_seq.shape[0], n_ref))
    for v in range(target_seq.shape[0]):
        out[v] = np.bincount(path.ref, weights=target_seq[v, path.target], minlength=n_ref) / counts
    return out


def sync_to_reference(reference, samples, settings: EdtwSettings = EdtwSettings(), label="cycle"):
    """Solve EDTW against ``reference`` and return ``(synced, solution)``."""
    sol = edtw_solve(reference, samples, settings, label=label)
    return synchronize_cycle(sol, samples, np.shape(reference)[1]), sol


# --------------------------------------------------------------------------
# Whole-battery synchronization


@dataclass(frozen=True)
class SyncedBattery:
    """All cycles of one battery resampled to the reference length.

    ``synced`` has shape ``(C, J, K_ref)`` and is in physical units.
    """

    reference_length: int
    synced: np.ndarray
    source: str
    per_cycle_energy_error: np.ndarray
    cycle_indices: np.ndarray
    ref_cycle: int
    converged: np.ndarray = None
    iterations: np.ndarray = None
    settings: EdtwSettings = field(default_factory=EdtwSettings)

    def __post_init__(self):
        s = np.asarray(self.synced, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != self.reference_length:
            raise InputError("synced array must be (C, J, K_ref)")
        object.__setattr__(self, "synced", s)
        object.__setattr__(self, "cycle_indices", np.asarray(self.cycle_indices, dtype=int))
        n = s.shape[0]
        if self.converged is None:
            object.__setattr__(self, "converged", np.ones(n, dtype=bool))
        if self.iterations is None:
            object.__setattr__(self, "iterations", np.zeros(n, dtype=int))

    def __len__(self):
        return self.synced.shape[0]

    def cycle(self, cycle_index: int) -> np.ndarray:
        pos = np.flatnonzero(self.cycle_indices == cycle_index)
        if len(pos) == 0:
            raise KeyError(f"cycle {cycle_index} not synchronized")
        return self.synced[pos[0]]

    def select(self, cycle_indices) -> "SyncedBattery":
        """Sub-battery restricted to ``cycle_indices`` (kept in the given order)."""
        lookup = {int(c): i for i, c in enumerate(self.cycle_indices)}
        try:
            pos = [lookup[int(c)] for c in cycle_indices]
        except KeyError as exc:
            raise KeyError(f"cycle {exc.args[0]} not synchronized") from None
        return SyncedBattery(
            self.reference_length,
            self.synced[pos],
            self.source,
            self.per_cycle_energy_error[pos],
            self.cycle_indices[pos],
            self.ref_cycle,
            self.converged[pos],
            self.iterations[pos],
            self.settings,
        )

    def voltage_monotone(self, noise_bound: float) -> bool:
        """True if every synchronized voltage curve never rises by more than ``noise_bound``."""
        rises = np.diff(self.synced[:, 0, :], axis=1)
        return bool(np.all(rises <= noise_bound))


def synchronize_battery(
    record: BatteryRecord,
    ref_cycle: Optional[int] = None,
    settings: EdtwSettings = EdtwSettings(),
    reference: Optional[np.ndarray] = None,
) -> SyncedBattery:
    """Synchronize every cycle of ``record`` to a reference cycle.

    The reference is cycle ``ref_cycle`` of ``record`` (default: the first
    cycle) unless an explicit ``reference`` array is passed, which is how a
    test battery is put on a training battery's time axis.
    """
    if reference is None:
        if ref_cycle is None:
            ref_cycle = record.cycles[0].cycle_index
        try:
            reference = record.cycle(ref_cycle).samples
        except KeyError:
            raise InputError(f"reference cycle {ref_cycle} not in battery {record.battery_id}") from None
    reference = np.asarray(reference, dtype=np.float64)
    k_ref = reference.shape[1]
    n = len(record)
    out = np.empty((n, reference.shape[0], k_ref))
    err = np.empty(n)
    conv = np.empty(n, dtype=bool)
    iters = np.empty(n, dtype=int)
    for i, cyc in enumerate(record.cycles):
        try:
            synced, sol = sync_to_reference(
                reference, cyc.samples, settings, label=f"cycle {cyc.cycle_index}"
            )
        except AlignmentError as exc:
            raise AlignmentError(f"cycle {cyc.cycle_index}: {exc}") from exc
        out[i] = synced
        err[i] = relative_energy_error(cyc.samples, synced)
        conv[i] = sol.converged
        iters[i] = sol.iterations_used
    return SyncedBattery(
        reference_length=k_ref,
        synced=out,
        source=record.battery_id,
        per_cycle_energy_error=err,
        cycle_indices=record.cycle_indices,
        ref_cycle=-1 if ref_cycle is None else int(ref_cycle),
        converged=conv,
        iterations=iters,
        settings=settings,
    )


# --------------------------------------------------------------------------
# Persistence

SYNCED_HEADER = ["cycle", "k"] + list(VARIABLES)


def write_synced(synced: SyncedBattery, out_dir) -> None:
    """Write ``synced.csv`` (``k`` is 1-based) and ``sync_meta.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".synced.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SYNCED_HEADER)
        for c, arr in zip(synced.cycle_indices, synced.synced):
            for k in range(synced.reference_length):
                w.writerow([int(c), k + 1] + [repr(float(x)) for x in arr[:, k]])
    os.replace(tmp, out_dir / "synced.csv")

    s = synced.settings
    meta = {
        "source": synced.source,
        "K_ref": synced.reference_length,
        "ref_cycle": synced.ref_cycle,
        "M": s.n_components if s.n_components is not None else synced.synced.shape[1],
        "tol": s.tol,
        "max_iter": s.max_iter,
        "w_E": s.energy_weight,
        "cycles": [int(c) for c in synced.cycle_indices],
        "energy_error": [float(e) for e in synced.per_cycle_energy_error],
        "converged": [bool(c) for c in synced.converged],
        "iterations": [int(i) for i in synced.iterations],
    }
    tmp = out_dir / ".sync_meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1) + "\n")
    os.replace(tmp, out_dir / "sync_meta.json")


def read_synced(out_dir) -> SyncedBattery:
    out_dir = Path(out_dir)
    try:
        meta = json.loads((out_dir / "sync_meta.json").read_text())
    except FileNotFoundError:
        raise InputError(f"no sync_meta.json in {out_dir}") from None
    k_ref = int(meta["K_ref"])
    cycles = meta["cycles"]
    data = np.empty((len(cycles), N_VARIABLES, k_ref))
    pos = {c: i for i, c in enumerate(cycles)}
    try:
        fh = open(out_dir / "synced.csv", newline="")
    except FileNotFoundError:
        raise InputError(f"no synced.csv in {out_dir}") from None
    seen = 0
    with fh:
        reader = csv.reader(fh)
        if next(reader, None) != SYNCED_HEADER:
            raise ParseError("synced.csv: bad header")
        for row_no, row in enumerate(reader, start=2):
            try:
                c, k = int(row[0]), int(row[1])
                data[pos[c], :, k - 1] = [float(x) for x in row[2:]]
            except (ValueError, KeyError, IndexError):
                raise ParseError(f"synced.csv: row {row_no}: malformed") from None
            seen += 1
    if seen != len(cycles) * k_ref:
        raise ParseError("synced.csv does not match sync_meta.json")
    m = meta["M"]
    settings = EdtwSettings(
        n_components=None if m == N_VARIABLES else m,
        tol=meta["tol"],
        max_iter=meta["max_iter"],
        energy_weight=meta["w_E"],
    )
    return SyncedBattery(
        reference_length=k_ref,
        synced=data,
        source=meta["source"],
        per_cycle_energy_error=np.array(meta["energy_error"]),
        cycle_indices=np.array(cycles),
        ref_cycle=meta["ref_cycle"],
        converged=np.array(meta["converged"]),
        iterations=np.array(meta["iterations"]),
        settings=settings,
    )
