import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from udigate.config import Config


@pytest.fixture
def fast_cfg() -> Config:
    """High bandwidth, zero identity latency: pulls and mounts cost ~0 virtual
    time so state-machine tests don't wade through transfer schedules."""
    return Config(registry_bandwidth=1e12, convert_bandwidth=1e12,
                  manifest_latency=0.0, identity_latency_mean=0.0,
                  mount_base_latency=0.0, mount_jitter_mean=0.0)


@pytest.fixture
def state_dir(tmp_path) -> str:
    d = tmp_path / "state"
    d.mkdir()
    return str(d)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines after the run, outside capture."""
    import helpers

    if helpers.CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in helpers.CRITERION_LINES:
            terminalreporter.write_line(line)
