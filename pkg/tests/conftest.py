import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_pose(rng, max_angle=np.pi * 0.9, max_trans=5.0):
    from elastic_submaps.se3 import exp

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    xi = np.concatenate([axis * rng.uniform(0, max_angle), rng.uniform(-max_trans, max_trans, 3)])
    return exp(xi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (title, passed, detail); filled by the acceptance suite
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
