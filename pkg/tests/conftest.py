import numpy as np
import pytest

from cmtk.metric import BField, build_metric
from cmtk.orbit import find_periodic_orbit
from cmtk.systems import circle_system, vdp_system


@pytest.fixture(scope="session")
def circle():
    return circle_system()


@pytest.fixture(scope="session")
def vdp():
    return vdp_system()


@pytest.fixture(scope="session")
def circle_orbit(circle):
    return find_periodic_orbit(circle, [0.5, 0.0])


@pytest.fixture(scope="session")
def vdp_orbit(vdp):
    return find_periodic_orbit(vdp, [2.0, 0.0])


@pytest.fixture(scope="session")
def circle_metric(circle, circle_orbit):
    return build_metric(circle, BField.identity(2), 1.0, circle_orbit.anchor)


@pytest.fixture(scope="session")
def vdp_metric(vdp, vdp_orbit):
    return build_metric(vdp, BField.identity(2), 1.0, vdp_orbit.anchor)


def polar_radius(r0, t):
    """Radial solution of r' = r - r^3."""
    return (1 + (1 - r0 ** 2) / r0 ** 2 * np.exp(-2 * t)) ** -0.5


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=lambda k: int(k[1:])):
            terminalreporter.write_line(RESULTS[key])
