import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lfofr.pipeline import SmoothingConfig, fit_model
from lfofr.pointwise import PointwiseModelConfig
from lfofr.simulation import SimConfig, generate_dataset

settings.register_profile(
    "lfofr", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("lfofr")

SMALL_MODEL = PointwiseModelConfig(K_w=10, K_g=8)
SMALL_SMOOTHING = SmoothingConfig(knots_beta=5, knots_s=6, knots_u=4, knots_G=6)


def pytest_configure(config):
    config.addinivalue_line("markers", "oracle: exact equivalence against an independent dense computation")
    config.addinivalue_line("markers", "slow: Monte Carlo checks taking more than a few seconds")
    config.addinivalue_line("markers", "acceptance: desk-scale acceptance criteria")


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(SimConfig(I=30, J_mean=4, L=16, seed=11))


@pytest.fixture(scope="session")
def small_model(small_data):
    d, _ = small_data
    return fit_model(d, SMALL_MODEL, SMALL_SMOOTHING)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
