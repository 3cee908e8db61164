import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from soh_twin.dataset import BatteryRecord, CycleTrajectory, SyntheticConfig, generate_synthetic
from soh_twin.errors import GridMismatchError, MatchExhaustedError
from soh_twin.importance import GridSpec
from soh_twin.realtime import (
    OnlinePrefix,
    OnlineSession,
    error_by_step,
    estimate_at,
    match_and_reconstruct,
    prefix_similarity,
    read_stream,
    stream_cycle,
    variable_scale,
    write_stream,
)


def record_from(voltages, caps=None):
    """Training record whose second variable is all zeros."""
    cycles = tuple(
        CycleTrajectory(i + 1, np.vstack([v, np.zeros(len(v))]), 1.0) for i, v in enumerate(voltages)
    )
    caps = np.linspace(1.1, 0.9, len(cycles)) if caps is None else np.asarray(caps)
    return BatteryRecord("r", cycles, caps)


class TestSimilarity:
    def test_own_prefix_is_zero(self, small_record):
        cyc = small_record.cycle(4)
        assert prefix_similarity(cyc.samples[:, :10], cyc) == 0

    def test_shorter_candidate_not_comparable(self):
        assert prefix_similarity(np.ones((1, 5)), np.ones((1, 4))) is None

    def test_hand_example(self):
        assert prefix_similarity(np.array([[1.0, 2.0]]), np.array([[1.0, 4.0]])) == 2.0

    def test_z_scoring(self):
        s = prefix_similarity(np.array([[1.0, 2.0]]), np.array([[1.0, 4.0, 9.0]]), mean=[5.0], std=[2.0])
        assert s == pytest.approx(1.0, abs=1e-15)


# values on a millivolt-like grid; subnormal differences would underflow when squared
values = st.integers(-100_000, 100_000).map(lambda i: i / 1000)
prefixes = arrays(np.float64, st.tuples(st.just(2), st.integers(1, 8)), elements=values)


@settings(max_examples=100, deadline=None)
@given(prefixes, st.data())
def test_similarity_is_a_metric(a, data):
    b = data.draw(arrays(np.float64, a.shape, elements=values))
    s_ab = prefix_similarity(a, b)
    assert s_ab >= 0
    assert s_ab == prefix_similarity(b, a)
    assert (s_ab == 0) == np.array_equal(a, b)


class TestMatch:
    def test_self_match(self, small_record):
        cyc = small_record.cycle(20)
        rec = match_and_reconstruct(cyc.samples[:, :30], small_record)
        assert rec.matched_cycle == 20 and rec.similarity == 0
        assert np.array_equal(rec.samples, cyc.samples)

    def test_argmin(self):
        training = record_from([[0.0, 0.0, 7.0], [0.0, 2.0, 8.0], [0.0, 3.0, 9.0]])
        rec = match_and_reconstruct(np.array([[0.0, 1.0], [0.0, 0.0]]), training)
        # distances are 1, 1 and 2; the tie goes to the lower cycle index
        assert rec.matched_cycle == 1 and rec.similarity == 1.0
        rec = match_and_reconstruct(np.array([[0.0, 2.9], [0.0, 0.0]]), training)
        assert rec.matched_cycle == 3

    def test_three_versus_one(self):
        training = record_from([[0.0, 3.0, 5.0], [0.0, 1.0, 6.0]])
        rec = match_and_reconstruct(np.zeros((2, 2)), training)
        assert rec.matched_cycle == 2 and rec.similarity == 1.0
        assert rec.samples[0].tolist() == [0.0, 0.0, 6.0]

    def test_prefix_kept_bitwise(self):
        training = record_from([[0.0, 1.0, 2.0, 3.0]])
        prefix = np.array([[0.1 + 0.2, 1.0 / 3.0], [0.0, 0.0]])
        rec = match_and_reconstruct(prefix, training)
        assert np.array_equal(rec.samples[:, :2], prefix)
        assert rec.samples[0, 2:].tolist() == [2.0, 3.0]

    def test_shorter_candidates_skipped(self):
        training = record_from([[0.0, 1.0], [5.0, 5.0, 5.0, 5.0]])
        rec = match_and_reconstruct(np.zeros((2, 3)), training)
        assert rec.matched_cycle == 2

    def test_exhausted(self):
        training = record_from([[0.0, 1.0], [0.0, 1.0, 2.0]])
        with pytest.raises(MatchExhaustedError):
            match_and_reconstruct(np.zeros((2, 4)), training)

    def test_match_tracks_true_capacity(self):
        rec = generate_synthetic(SyntheticConfig(), seed=7)
        odd = rec.subset([i for i, c in enumerate(rec.cycle_indices) if c % 2 == 1])
        mean, std = variable_scale(odd)
        step = np.abs(np.diff(rec.capacities)).max()
        for c in range(60, 200, 14):
            samples = rec.cycle(c).samples
            r = match_and_reconstruct(samples[:, :100], odd, mean, std)
            assert abs(rec.capacity(r.matched_cycle) - rec.capacity(c)) <= step


class TestSession:
    def test_full_training_cycle_matches_offline(self, small_record, small_fit, small_session):
        prep = small_fit.prepared
        for c, offline in zip(prep.train_record.cycle_indices, small_fit.train_pred):
            est = estimate_at(small_record.cycle(c).samples, small_session)
            assert est.capacity == offline
            assert est.matched_cycle == c

    def test_first_step_estimate_exists(self, small_fit, small_session):
        cyc = small_fit.prepared.test_record.cycles[0]
        est = estimate_at(cyc.samples[:, :1], small_session)
        assert np.isfinite(est.capacity) and est.capacity > 0
        assert est.step == 1 and not est.in_important_interval

    def test_stream_length_and_consistency(self, small_record, small_fit, small_session):
        c = int(small_fit.prepared.train_record.cycle_indices[5])
        cyc = small_record.cycle(c)
        est = stream_cycle(cyc, small_session)
        assert [e.step for e in est] == list(range(1, cyc.length + 1))
        assert est[-1].capacity == small_fit.train_pred[5]
        again = stream_cycle(cyc, small_session)
        assert [e.capacity for e in again] == [e.capacity for e in est]

    def test_interval_flag(self, small_session):
        a, b = small_session.interval
        assert not small_session.in_interval(a) and small_session.in_interval(a + 1)
        assert small_session.in_interval(b + 1) and not small_session.in_interval(b + 2)

    def test_errors_are_kept_in_line(self, small_record, small_session):
        # longer than every training cycle: the last steps cannot be matched
        longest = max(small_record.cycles, key=lambda c: c.length).samples
        samples = np.concatenate([longest, longest[:, -3:]], axis=1)
        est = stream_cycle(samples, small_session)
        assert len(est) == samples.shape[1]
        assert est[-1].error is not None and np.isnan(est[-1].capacity)
        assert "longer than every training cycle" in est[-1].error
        assert est[0].error is None

    def test_grid_mismatch(self, small_record, small_fit):
        prep = small_fit.prepared
        other = GridSpec(prep.grid.grids_per_variable, ((0.0, 1.0), (0.0, 1.0)))
        with pytest.raises(GridMismatchError):
            OnlineSession(prep.train_record, small_record.cycles[0].samples, small_fit.params, other)

    def test_prefix_validation(self):
        with pytest.raises(Exception):
            OnlinePrefix(np.zeros((2, 0)))
        assert OnlinePrefix(np.zeros((2, 3))).current_step == 3


class TestStreamFiles:
    def test_write_and_read(self, small_fit, small_session, tmp_path):
        cyc = small_fit.prepared.test_record.cycles[0]
        est = stream_cycle(cyc.samples[:, :12], small_session)
        write_stream(est, tmp_path / "s.csv", truth=0.9, cycle_index=cyc.cycle_index)
        text = (tmp_path / "s.csv").read_text().splitlines()
        assert text[0] == "k,estimate_ah,matched_cycle,in_important_interval"
        assert len(text) == 12 + 2 and text[-1].startswith("# ")
        rows, summary = read_stream(tmp_path / "s.csv")
        assert [r[0] for r in rows] == list(range(1, 13))
        assert rows[3][1] == est[3].capacity
        assert float(summary["truth_ah"]) == 0.9 and int(summary["steps"]) == 12

    def test_error_by_step_ragged(self):
        from soh_twin.realtime import RealtimeEstimate as E

        a = [E(1, 1.0, 1, False), E(2, 1.2, 1, True)]
        b = [E(1, 0.5, 1, False)]
        out = error_by_step([a, b], [1.1, 0.6])
        assert np.allclose(out, [0.1, 0.1])
