import numpy as np
import pytest

from fedmobfair.trajectory import MILES_PER_DEG_LAT, Grid


def at_offset(grid: Grid, north: float, east: float) -> tuple[float, float]:
    """Coordinate ``north``/``east`` miles from the grid origin."""
    return grid.origin_lat + north / MILES_PER_DEG_LAT, grid.origin_lon + east / grid.miles_per_deg_lon


@pytest.fixture
def grid4():
    # 1 x 1 mile at 0.25 -> 4 x 4 cells
    return Grid(40.0, -75.0, 1.0, 1.0, 0.25)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
