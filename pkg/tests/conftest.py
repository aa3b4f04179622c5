import os
import shutil
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


SMALL_SCENARIO = {"n_cohort": 300, "n_gps": 24, "days": 4, "n_homesteads": 120,
                  "n_cols": 60, "n_rows": 60, "replicates": 2}


@pytest.fixture(scope="session")
def small_scenario(tmp_path_factory):
    """A small runnable dataset written once per session (treat as read-only)."""
    from ctxexposure.scenario import ScenarioConfig, write_scenario

    d = tmp_path_factory.mktemp("scenario")
    write_scenario(d, ScenarioConfig.from_dict(SMALL_SCENARIO))
    return d


@pytest.fixture
def scenario_copy(small_scenario, tmp_path):
    dst = tmp_path / "data"
    shutil.copytree(small_scenario, dst)
    return dst
