import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from soh_twin.errors import DegenerateDataError, InputError, KneeNotFoundError
from soh_twin.importance import (
    GridSpec,
    analyse_importance,
    chord_distance,
    decode,
    detect_knee_threshold,
    fit_grid,
    grid_encode,
    importance_profile,
    select_important,
    write_importance,
)
from soh_twin.warp import synchronize_battery


def stack(voltage, temperature=None):
    """Build ``(C, J, K)`` from per-cycle voltage rows."""
    v = np.asarray(voltage, dtype=float)
    t = np.zeros_like(v) if temperature is None else np.asarray(temperature, dtype=float)
    return np.stack([v, t], axis=1)


class TestProfile:
    def test_hand_example(self):
        # J=1 is emulated with a zero second variable
        synced = stack([[1, 1], [2, 1], [3, 4]])
        assert np.allclose(importance_profile(synced), [1 / 3, 1.0], rtol=0, atol=1e-15)

    def test_identical_slice_scores_zero(self):
        synced = stack([[5, 1], [5, 2], [5, 3]])
        scores = importance_profile(synced)
        assert scores[0] == 0 and scores[1] == 1

    def test_all_identical_is_degenerate(self):
        with pytest.raises(DegenerateDataError):
            importance_profile(stack([[1, 2], [1, 2]]))

    def test_single_cycle(self):
        with pytest.raises(InputError):
            importance_profile(stack([[1, 2]]))


profiles = arrays(np.float64, st.tuples(st.integers(2, 6), st.just(2), st.integers(2, 8)), elements=st.floats(-5, 5))


@settings(max_examples=60, deadline=None)
@given(profiles, st.randoms(use_true_random=False))
def test_profile_permutation_and_scale_invariant(synced, rnd):
    try:
        base = importance_profile(synced)
    except DegenerateDataError:
        return
    order = list(range(synced.shape[0]))
    rnd.shuffle(order)
    assert np.allclose(importance_profile(synced[order]), base, rtol=0, atol=1e-12)
    # a power of two scales every trace exactly
    assert np.array_equal(importance_profile(synced * 4.0), base)
    assert base.max() == 1.0 and base.min() >= 0


class TestKnee:
    def test_piecewise_linear_breakpoint(self):
        k = np.arange(1, 101)
        v = np.where(k <= 40, 3.6 - 0.02 * (k - 1), 3.6 - 0.02 * 39 - 0.002 * (k - 40))
        synced = stack([v, v + 0.01])
        scores = np.linspace(0.1, 1.0, 100)
        knee, delta = detect_knee_threshold(synced, scores)
        assert knee == 39  # 0-based position of k = 40
        assert delta == scores[39]

    def test_linear_voltage_has_no_knee(self):
        v = np.linspace(3.6, 2.0, 50)
        with pytest.raises(KneeNotFoundError):
            detect_knee_threshold(stack([v, v]), np.ones(50))

    def test_small_wiggle_skipped_for_later_knee(self):
        k = np.linspace(0, 1, 200)
        # tiny early bump then a pronounced late knee
        v = 3.6 - 0.3 * k - 2.0 * k**12 - 0.01 * np.exp(-(((k - 0.05) / 0.02) ** 2))
        knee, _ = detect_knee_threshold(stack([v, v]), np.ones(200))
        assert knee > 150

    def test_chord_distance_vanishes_at_ends(self):
        d = chord_distance(np.array([3.0, 2.9, 2.0, 1.0]))
        assert d[0] == 0 and abs(d[-1]) < 1e-15


class TestSelect:
    def test_all_above(self):
        assert select_important(np.array([0.5, 1.0, 0.7]), 0.5) == (0, 2)

    def test_single_peak(self):
        assert select_important(np.array([0.0, 1.0, 0.0]), 0.5) == (1, 1)

    def test_run_around_argmax_only(self):
        s = np.array([0.9, 0.1, 0.6, 1.0, 0.8, 0.2, 0.95])
        assert select_important(s, 0.5) == (2, 4)

    @pytest.mark.parametrize("delta", [0.0, 1.5])
    def test_bad_threshold(self, delta):
        with pytest.raises(InputError):
            select_important(np.array([1.0]), delta)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)), st.floats(0.01, 1.0))
def test_selection_contains_argmax(raw, delta):
    if raw.max() == 0:
        return
    scores = raw / raw.max()
    a, b = select_important(scores, delta)
    assert a <= int(np.argmax(scores)) <= b
    assert np.all(scores[a : b + 1] >= delta)
    assert a == 0 or scores[a - 1] < delta
    assert b == len(scores) - 1 or scores[b + 1] < delta


class TestGrid:
    def test_row_count(self):
        synced = stack([[2.0, 3.6], [2.5, 3.0]], [[30, 31], [32, 33]])
        spec = fit_grid(synced, 200)
        assert spec.n_rows == 400

    def test_first_grid_width(self):
        synced = stack([[2.0, 3.6], [2.5, 3.0]], [[30, 31], [32, 33]])
        spec = fit_grid(synced, 200)
        lo, hi = spec.ranges[0]
        assert lo == pytest.approx(2.0, abs=1e-8) and hi == pytest.approx(3.6, abs=1e-8)
        assert spec.bins(np.array([[2.0, 2.0 + 1.6 / 200 * 0.999], [31, 31]]))[0].tolist() == [0, 0]
        assert spec.bins(np.array([[2.0 + 1.6 / 200 * 1.001], [31]]))[0, 0] == 1

    def test_constant_variable(self):
        with pytest.raises(DegenerateDataError):
            fit_grid(stack([[2.0, 3.6], [2.5, 3.0]], [[30, 30], [30, 30]]), 10)

    def test_interval_restricts_range(self):
        synced = stack([[9.0, 2.0, 3.0], [9.0, 2.5, 3.5]], [[0, 1, 2], [0, 2, 3]])
        spec = fit_grid(synced, 10, interval=(1, 2))
        assert spec.ranges[0][1] == pytest.approx(3.5, abs=1e-8)

    def test_digest_tracks_ranges(self):
        a = GridSpec(10, ((0.0, 1.0), (0.0, 2.0)))
        b = GridSpec(10, ((0.0, 1.0), (0.0, 2.0 + 1e-12)))
        assert a.digest() == GridSpec.from_dict(a.to_dict()).digest()
        assert a.digest() != b.digest()


class TestEncode:
    spec = GridSpec(4, ((0.0, 4.0), (10.0, 20.0)))

    def test_floor_rule_and_clamp(self):
        cycle = np.array([[0.0, 2.0, 4.0, -1.0, 99.0], [10.0, 15.0, 20.0, 0.0, 30.0]])
        enc = grid_encode(cycle, (0, 4), self.spec)
        bins_v = np.argmax(enc.matrix[:4], axis=0)
        bins_t = np.argmax(enc.matrix[4:], axis=0)
        assert bins_v.tolist() == [0, 2, 3, 0, 3]
        assert bins_t.tolist() == [0, 2, 3, 0, 3]
        assert np.all(enc.matrix.sum(axis=0) == 2)

    def test_interval_slicing(self):
        cycle = np.array([[0.0, 1.0, 2.0, 3.0], [10.0, 12.0, 14.0, 16.0]])
        enc = grid_encode(cycle, (1, 2), self.spec)
        assert enc.n_steps == 2 and enc.interval == (1, 2)
        assert np.argmax(enc.matrix[:4], axis=0).tolist() == [1, 2]

    def test_wrong_variable_count(self):
        with pytest.raises(InputError):
            grid_encode(np.zeros((3, 4)), (0, 3), self.spec)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.just(2), st.integers(1, 20)), elements=st.floats(-50, 50)), st.integers(2, 50))
def test_encode_decode_idempotent(cycle, L):
    spec = GridSpec(L, ((-10.0, 10.0), (-20.0, 30.0)))
    enc = grid_encode(cycle, (0, cycle.shape[1] - 1), spec)
    assert np.all(enc.matrix.sum(axis=0) == 2)
    assert set(np.unique(enc.matrix)) <= {0.0, 1.0}
    again = grid_encode(decode(enc, spec), (0, cycle.shape[1] - 1), spec)
    assert np.array_equal(again.matrix, enc.matrix)


class TestAnalyse:
    def test_profile_on_synthetic(self, small_record, tmp_path):
        synced = synchronize_battery(small_record)
        prof = analyse_importance(synced)
        assert prof.scores.max() == 1.0
        a, b = prof.interval
        assert a <= b and prof.length == b - a + 1
        assert np.all(prof.scores[a : b + 1] >= prof.threshold)
        write_importance(prof, tmp_path)
        lines = (tmp_path / "importance.csv").read_text().splitlines()
        assert lines[0] == "k,importance" and len(lines) == synced.reference_length + 1
        meta = json.loads((tmp_path / "importance_meta.json").read_text())
        assert meta["k_start"] == a + 1 and meta["K_ID"] == prof.length
        assert prof.contains(a) and not prof.contains(b + 1)
