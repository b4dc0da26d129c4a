import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from starmot.geometry import Box3, Pose, so3_exp

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_pose(rng, scale: float = 5.0) -> Pose:
    return Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * scale)


def random_box(rng, spread: float = 2.0) -> Box3:
    return Box3(rng.normal(size=3) * spread, rng.uniform(0.5, 4.0, size=3), rng.uniform(-np.pi, np.pi))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import _report

    if _report.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_report.LINES):
            terminalreporter.write_line(_report.LINES[n])
