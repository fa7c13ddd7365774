import pytest

from empclab.model import reactor_model
from empclab.ocp import SchemeConfig
from empclab.sop import solve_sop


@pytest.fixture(scope="session")
def reactor():
    return reactor_model()


@pytest.fixture(scope="session")
def steady(reactor):
    return solve_sop(reactor)


@pytest.fixture(scope="session")
def schemes(steady):
    return {kind: SchemeConfig(kind, steady) for kind in ("terminal", "plain", "gradcorr")}
