import logging

import pytest

from faceval import synth


@pytest.fixture(scope="session")
def small_config():
    return synth.SynthConfig(n_identities=6, frames_per_cell=6, occupants=3, seed=7)


@pytest.fixture(scope="session")
def small_data(small_config):
    return synth.generate_truth(small_config)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("faceval").setLevel(logging.ERROR)
    yield
