import numpy as np
import pytest

from acflow.grid import GridSpec, build_flat_metric, build_perturbed_metric
from acflow.initial import kahler_standard, random_perturbation


@pytest.fixture(scope="session")
def thin16():
    return GridSpec((16, 16, 1, 1), (1.0,) * 4)


@pytest.fixture(scope="session")
def flat8():
    return build_flat_metric(GridSpec.uniform(8))


@pytest.fixture(scope="session")
def pert8():
    return build_perturbed_metric(GridSpec.uniform(8), 0.1, 7)


def smooth_compatible(metric, amplitude=0.1, seed=0):
    return random_perturbation(kahler_standard(metric.grid), amplitude, seed, metric)


def great_circle(grid, axis=0, k=1):
    x = grid.coords()[axis]
    th = np.broadcast_to(2 * np.pi * k * x / grid.lengths[axis], grid.shape)
    return np.stack([np.cos(th), np.sin(th), np.zeros(grid.shape)], axis=-1)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:s.index("]")])):
            terminalreporter.write_line(line)
