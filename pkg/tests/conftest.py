import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mseit.geometry import ElectrodeLayout, build_disc_mesh

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def layout():
    return ElectrodeLayout(16, 0.12)


@pytest.fixture(scope="session")
def small_mesh(layout):
    return build_disc_mesh(0.1, 712, layout)


@pytest.fixture(scope="session")
def mid_mesh(layout):
    return build_disc_mesh(0.1, 2032, layout)


@pytest.fixture(scope="session")
def fine_mesh(layout):
    return build_disc_mesh(0.1, 7726, layout)


def ground(v):
    v = np.asarray(v, dtype=float)
    return v - v.mean()
