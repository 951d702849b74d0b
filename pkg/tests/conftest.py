import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture
def record():
    def rec(num, passed, detail):
        ACCEPTANCE[num] = (bool(passed), detail)
        print(f"CRITERION {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    return rec


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"CRITERION {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
