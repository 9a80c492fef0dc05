import numpy as np
import pytest

from shockstab import models, profile, templates


def sech(x):
    # overflow-safe 1/cosh
    ax = np.abs(x)
    return 2.0 * np.exp(-ax) / (1.0 + np.exp(-2.0 * ax))


@pytest.fixture(scope="session")
def burgers():
    m = models.burgers()
    return m, profile.solve_profile(m)


@pytest.fixture(scope="session")
def quadratic():
    m = models.quadratic_gradient()
    return m, profile.solve_profile(m)


@pytest.fixture(scope="session")
def burgers_bundle(burgers):
    return templates.template_bundle(*burgers)


@pytest.fixture(scope="session")
def quadratic_bundle(quadratic):
    return templates.template_bundle(*quadratic)
