import numpy as np
import pytest

from hyperlista.dictionary import build_setup
from hyperlista.problems import GenConfig, generate_dictionary, generate_instances

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_setup():
    """Built 20x40 setup; cheap enough for every unit test."""
    return build_setup(generate_dictionary(20, 40, 3))


@pytest.fixture(scope="session")
def setup_50x100():
    return build_setup(generate_dictionary(50, 100, 1))


@pytest.fixture(scope="session")
def instances_50x100(setup_50x100):
    return generate_instances(setup_50x100, GenConfig(50, 100, seed=21, count=64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark():
    """50x100 quick-profile benchmark tuned once per session (about two minutes).

    Holds the config, the data and the tuned HyperLISTA and fixed
    momentum baseline.
    """
    from hyperlista.evaluation import ExperimentConfig, prepare_data, tune_methods

    cfg = ExperimentConfig(m=50, n=100, seed=0, methods=("alista_mm_fixed", "hyperlista"))
    data = prepare_data(cfg, with_validation=False)
    tuned = tune_methods(data.setup, data.train, cfg)
    return cfg, data, tuned
