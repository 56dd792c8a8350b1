import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdfgraph.sim import sample_sdf_grid

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def plane_sdf(normal, offset):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return lambda p: p @ n - offset


def sphere_sdf(center, radius):
    c = np.asarray(center, dtype=float)
    return lambda p: np.linalg.norm(p - c, axis=1) - radius


def sdf_grid(fn, voxel_size, lo, hi, truncation=None, observe=None):
    return sample_sdf_grid(fn, voxel_size, lo, hi, truncation, observe=observe)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
