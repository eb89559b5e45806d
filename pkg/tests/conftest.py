import logging

import pytest

from trajlab.data import Dataset
from trajlab.network import build_chain, build_grid, build_two_route

logging.getLogger("trajlab").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def grid3():
    return build_grid(3, 3, 200.0)


@pytest.fixture(scope="session")
def grid2():
    return build_grid(2, 2, 100.0)


@pytest.fixture(scope="session")
def two_route():
    return build_two_route()


@pytest.fixture(scope="session")
def chain():
    return build_chain((100.0, 100.0))


@pytest.fixture
def upper_route():
    return ("a>b", "b>c", "c>e", "e>f")


@pytest.fixture
def lower_route():
    return ("a>b", "b>d", "d>e", "e>f")


@pytest.fixture
def two_route_data(upper_route, lower_route):
    """Three trajectories on the upper branch, one on the lower"""
    return Dataset.from_routes([upper_route, upper_route, upper_route, lower_route], tag="toy")
