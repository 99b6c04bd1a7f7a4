import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dipac.core import DynamicsParams, ParticleState
from dipac.tasks import DENSITY, blob_case

settings.register_profile("dipac", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dipac")


def blob(n=20, seed=0, center=(0.5, 0.5, 0.5), radius=0.05, v=None):
    """Random elastic blob at rest (F = I, C = 0)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(center) + rng.uniform(-radius, radius, (n, 3))
    vol = (0.5 / 64) ** 3
    return ParticleState.at_rest(x, DENSITY * vol, vol, v=v)


@pytest.fixture
def no_gravity():
    return DynamicsParams(gravity=(0.0, 0.0, 0.0))


@pytest.fixture
def small_case():
    return blob_case(0, 5, 2, 20)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
