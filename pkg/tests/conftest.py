import functools

import pytest
from hypothesis import HealthCheck, settings

from hdtsim.config import preset
from hdtsim.simengine import Event, run

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@functools.lru_cache(maxsize=None)
def scenario_run(name: str, integrator: str = "euler", vin_factor: float | None = None,
                 dt: float | None = None):
    """Cached preset run; callers must not mutate the returned result."""
    spec = preset(name)
    spec.integrator = integrator
    if dt is not None:
        spec.dt = dt
    if vin_factor is not None:
        spec.events = (Event.scale_vin(0.1, vin_factor),)
    return run(spec)


@pytest.fixture(scope="session")
def runs():
    return scenario_run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
