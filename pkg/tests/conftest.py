import os

import pytest
from hypothesis import HealthCheck, settings

from helpers import even_config
from qdebruijn.simulator import build_initial_world

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion -> (passed, detail); filled by test_acceptance, printed after the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in sorted(ACCEPTANCE_RESULTS.items(), key=lambda kv: int(kv[0].split(".")[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def even16():
    """16 nodes at j/16 in the ideal topology (d=2, c=3)."""
    return build_initial_world(even_config())
