from __future__ import annotations

import math

import pytest
from hypothesis import HealthCheck, settings

from udot.geometry import annulus_region, unit_square_region
from udot.solver import make_problem, solve_ode
from udot.surplus import get_surplus

settings.register_profile(
    "udot", deadline=None, max_examples=30, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("udot")

ANNULUS_F = 4.0 / (3.0 * math.pi)
ANNULUS_G = 1.0 / (2.0 * math.pi)


@pytest.fixture(scope="session")
def annulus():
    return get_surplus("annulus")


@pytest.fixture(scope="session")
def strip():
    return get_surplus("strip")


@pytest.fixture(scope="session")
def tilted():
    return get_surplus("tilted")


@pytest.fixture(scope="session")
def ring():
    return annulus_region()


@pytest.fixture(scope="session")
def square():
    return unit_square_region()


@pytest.fixture(scope="session")
def cases(annulus, strip, tilted, ring, square):
    """(model, region, f) per preset name."""
    return {"annulus": (annulus, ring, ANNULUS_F), "strip": (strip, square, 1.0),
            "tilted": (tilted, square, 1.0)}


@pytest.fixture(scope="session")
def strip_problem():
    return make_problem("strip")


@pytest.fixture(scope="session")
def strip_solution(strip_problem):
    return solve_ode(strip_problem)


@pytest.fixture(scope="session")
def annulus_problem():
    return make_problem("annulus")


@pytest.fixture(scope="session")
def annulus_solution(annulus_problem):
    return solve_ode(annulus_problem)


@pytest.fixture(scope="session")
def tilted_problem():
    return make_problem("tilted", ode_steps=128)


@pytest.fixture(scope="session")
def tilted_solution(tilted_problem):
    return solve_ode(tilted_problem)
