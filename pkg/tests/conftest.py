import numpy as np
import pytest

from risdoa.geometry import AngleGrid, ArrayGeometry, AnglePair, build_dictionary


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run full-scale checks marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow; pass --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


DESK_TARGETS = ((-33.7, -27.9), (9.6, 31.8), (46.2, -16.3))


def draw_sensors(seed, count, span=60.0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        a, e = rng.uniform(-span, span, 2)
        try:
            out.append(AnglePair(round(float(a), 1), round(float(e), 1)))
        except ValueError:
            pass
    return out


@pytest.fixture(scope="session")
def desk_geometry():
    return ArrayGeometry.half_wavelength(10, 10)


@pytest.fixture(scope="session")
def default_dictionary(desk_geometry):
    grid = AngleGrid()
    return build_dictionary(grid, grid, desk_geometry)


_CRITERIA = {}


@pytest.fixture
def report():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, passed, detail, skipped=False):
        status = "SKIP" if skipped else ("PASS" if passed else "FAIL")
        line = f"criterion {number}: {status}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
