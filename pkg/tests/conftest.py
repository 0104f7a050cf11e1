import numpy as np
import pytest
from hypothesis import settings

from qhgm.povm import build_default_icpovm

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def povm():
    return build_default_icpovm()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_hermitian(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return (a + a.conj().T) / 2


def random_params(rng, n, w_max=1.0):
    from qhgm.hamiltonian import WeightMatrix
    from qhgm.model import ModelParams

    w = rng.uniform(-w_max, w_max, size=(n, n))
    np.fill_diagonal(w, 0)
    return ModelParams(WeightMatrix(w, w_max), rng.uniform(0, np.pi, n), rng.uniform(0, 2 * np.pi, n))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
