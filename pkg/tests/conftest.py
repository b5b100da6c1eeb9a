from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from casimir_films import lifshitz as L
from casimir_films.dielectric import bundled_model

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def au():
    return bundled_model("au")


@pytest.fixture(scope="session")
def psi():
    return bundled_model("psi")


@pytest.fixture(scope="session")
def au_law(au):
    """Tabulated Au/Au gradient law; cheap to call inside Monte-Carlo loops."""
    return L.GradientLaw(L.MaterialAssignment(au, au), a_min=10e-9, a_max=3e-6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
