import numpy as np
import pytest

from soh_twin import pipeline
from soh_twin.errors import ConfigError, InputError


class TestConfig:
    def test_flat_and_nested_keys(self):
        cfg = pipeline.config_from_mapping(
            {"grids_per_variable": "50", "train.learning_rate": "0.01", "split.train_end_cycle": "652",
             "edtw.max_iter": "7", "synth.n_cycles": "90"}
        )
        assert cfg.grids_per_variable == 50
        assert cfg.train.learning_rate == 0.01
        assert cfg.split.train_end_cycle == 652
        assert cfg.edtw.max_iter == 7
        assert cfg.synthetic.n_cycles == 90

    def test_seed_reaches_training(self):
        cfg = pipeline.config_from_mapping({"seed": "11"})
        assert cfg.seed == 11 and cfg.train.seed == 11

    def test_none_clears_optional(self):
        cfg = pipeline.config_from_mapping({"split.train_end_cycle": "none"})
        assert cfg.split.train_end_cycle is None

    @pytest.mark.parametrize(
        "values", [{"bogus": "1"}, {"train.bogus": "1"}, {"nope.x": "1"}, {"train.hidden": "many"}]
    )
    def test_bad_keys(self, values):
        with pytest.raises(ConfigError):
            pipeline.config_from_mapping(values)

    def test_invalid_nested_value(self):
        with pytest.raises(InputError):
            pipeline.config_from_mapping({"split.train_fraction": "1.5"})

    def test_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 3\n# comment\ntrain.max_epochs = 9  # short\n")
        assert pipeline.read_config_file(path) == {"seed": "3", "train.max_epochs": "9"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            pipeline.read_config_file(tmp_path / "none.cfg")


class TestOffline:
    def test_importance_uses_training_cycles_only(self, small_fit):
        prep = small_fit.prepared
        assert set(prep.train_record.cycle_indices).isdisjoint(prep.test_record.cycle_indices)
        assert len(prep.profile.scores) == prep.synced.reference_length

    def test_grid_covers_training_interval(self, small_fit):
        prep = small_fit.prepared
        a, b = prep.interval
        train = prep.synced.select(prep.train_record.cycle_indices).synced[:, :, a : b + 1]
        for j, (lo, hi) in enumerate(prep.grid.ranges):
            assert lo <= train[:, j].min() and train[:, j].max() <= hi

    def test_predictions_have_one_value_per_cycle(self, small_fit):
        prep = small_fit.prepared
        assert len(small_fit.train_pred) == len(prep.train_record)
        assert len(small_fit.test_pred) == len(prep.test_record)
        assert np.all(np.isfinite(small_fit.test_pred))

    def test_rerun_is_identical(self, small_record, small_config, small_fit):
        again = pipeline.run_offline(small_record, small_config)
        assert np.array_equal(again.test_pred, small_fit.test_pred)
        assert again.params.grid_digest == small_fit.params.grid_digest
