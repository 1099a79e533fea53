import numpy as np
import pytest

from epildp import models as M
from epildp import nsfd as NF


@pytest.fixture(scope="session")
def sis_model():
    return M.sis(1.5, 1.0)


@pytest.fixture(scope="session")
def siv_model():
    return M.siv()


@pytest.fixture(scope="session")
def siv_iv_model():
    return M.siv_reduced()


@pytest.fixture(scope="session")
def siv_equilibria(siv_model):
    return M.find_equilibria(siv_model, M.default_seed_grid(siv_model))


@pytest.fixture(scope="session")
def siv_iv_equilibria(siv_iv_model):
    return M.find_equilibria(siv_iv_model, M.default_seed_grid(siv_iv_model, per_axis=7))


@pytest.fixture(scope="session")
def sis_metzler():
    return NF.metzler_sis(1.5, 1.0)


@pytest.fixture(scope="session")
def siv_metzler():
    return NF.metzler_siv()


def rk4(f, x, T, dt):
    """Plain fixed-step RK4, the independent ODE oracle used by several tests."""
    x = np.asarray(x, dtype=float)
    t = 0.0
    while t < T - 1e-12:
        h = min(dt, T - t)
        k1 = f(x)
        k2 = f(x + h / 2 * k1)
        k3 = f(x + h / 2 * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x
