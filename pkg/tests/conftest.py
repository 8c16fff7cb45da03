import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from omgsplat.scene import SceneSpec, generate_synthetic_scene

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """12 Gaussians, 2 lights, 20x20 cameras."""
    return generate_synthetic_scene(SceneSpec(count=12, width=20, height=20, n_lights=2, seed=7, n_views=4))


@pytest.fixture(scope="session")
def medium_scene():
    return generate_synthetic_scene(SceneSpec(count=32, width=32, height=32, seed=11, n_views=4))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
