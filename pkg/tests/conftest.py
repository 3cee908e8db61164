import dataclasses

import numpy as np
import pytest

from soh_twin import pipeline
from soh_twin.dataset import SyntheticConfig, generate_synthetic

SMALL_SYNTH = SyntheticConfig(n_cycles=40, base_length=80)


@pytest.fixture(scope="session")
def small_record():
    return generate_synthetic(SMALL_SYNTH, seed=7)


@pytest.fixture(scope="session")
def small_config():
    cfg = pipeline.PipelineConfig(synthetic=SMALL_SYNTH, seed=7)
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, max_epochs=4, hidden=8))
    return cfg.with_seed(7)


@pytest.fixture(scope="session")
def small_fit(small_record, small_config):
    """A quickly trained model on a small battery; accuracy is irrelevant here."""
    return pipeline.run_offline(small_record, small_config)


@pytest.fixture(scope="session")
def small_session(small_record, small_config, small_fit):
    prep = small_fit.prepared
    return pipeline.make_session(small_record, prep.train_record, small_fit.params, prep.grid, small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance results are collected here and echoed at the end of the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status} {detail}")
