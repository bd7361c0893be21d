import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# delta/Delta = 29/58 ms
TAU = 0.058 - 0.029 / 3.0


@pytest.fixture
def tau():
    return TAU


@pytest.fixture(scope="session")
def small_phantom():
    from stretchq.phantom import generate_phantom, preset_spec

    spec = preset_spec("human", dims=(4, 4, 2))
    vol, truth = generate_phantom(spec)
    return spec, vol, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
