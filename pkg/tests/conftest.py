import numpy as np
import pytest

from scanline import phantom
from scanline.selftest import SMALL_HEIGHT, SMALL_WIDTH, small_task

# Lines appended by the acceptance module, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def centred_state():
    return phantom.LatentState(
        cavity_center_row=63.5,
        cavity_center_col=127.5,
        cavity_semi_axis_r=30.0,
        cavity_semi_axis_c=55.0,
        wall_thickness=7.0,
        phase=0.7,
    )


@pytest.fixture(scope="session")
def task_small():
    return small_task()


@pytest.fixture(scope="session")
def small_grid():
    return SMALL_HEIGHT, SMALL_WIDTH
