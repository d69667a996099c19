import random

import pytest
from hypothesis import strategies as st

from nexagon.hexgrid import MAX_RESOLUTION, GeoCoordinate, latlng_to_cell
from nexagon.stack import LocalStack, StackConfig

# Keep clear of the poles and the antimeridian, where the projection clips.
coords = st.builds(
    GeoCoordinate,
    st.floats(min_value=-85.0, max_value=85.0, allow_nan=False),
    st.floats(min_value=-179.0, max_value=179.0, allow_nan=False),
)
resolutions = st.integers(min_value=1, max_value=MAX_RESOLUTION)
cells = st.builds(latlng_to_cell, coords, resolutions)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def stack():
    return LocalStack(StackConfig(), random.Random(99))


def random_coord(rng: random.Random, lat=(-80.0, 80.0), lon=(-175.0, 175.0)) -> GeoCoordinate:
    return GeoCoordinate(rng.uniform(*lat), rng.uniform(*lon))


# Acceptance verdicts, one line per criterion, echoed after the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
