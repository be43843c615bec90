import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dplab import _kernels
from dplab.models import InitSpec, build_mlp

settings.register_profile("dplab", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dplab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return build_mlp([4, 6, 3], "tanh", InitSpec("uniform", seed=7))


@pytest.fixture(params=_kernels.BACKENDS)
def backend(request):
    previous = _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(previous)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
