import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lavps.prior import GaussianMixture
from lavps.schedule import make_schedule

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def sched10():
    return make_schedule(10)


@pytest.fixture
def sched():
    return make_schedule(1000)


@pytest.fixture
def gm2():
    """2-D two-component mixture used across modules."""
    return GaussianMixture(
        np.array([0.4, 0.6]),
        np.array([[-1.0, -0.5], [1.0, 1.0]]),
        np.array([[[0.15, 0.03], [0.03, 0.1]], [[0.2, 0.05], [0.05, 0.1]]]),
    )


def random_gm(rng, dim, n_comp, spread=1.5):
    means = rng.normal(0, spread, (n_comp, dim))
    B = rng.normal(0, 0.5, (n_comp, dim, dim))
    covs = B @ np.swapaxes(B, -1, -2) / dim + 0.1 * np.eye(dim)
    w = rng.dirichlet(np.ones(n_comp))
    return GaussianMixture(w, means, covs)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
