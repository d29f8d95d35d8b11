import numpy as np
import pytest

from qkvguide import tensor as T
from qkvguide.config import build_config
from qkvguide.model import ModelConfig, ToyDenoiser

# filled by test_acceptance, printed once at the end of the session
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0][1:])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture(params=T.available_backends())
def backend(request):
    previous = T.set_backend(request.param)
    yield request.param
    T.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def model():
    return ToyDenoiser(ModelConfig())


@pytest.fixture(scope="session")
def default_cfg():
    return build_config({})


@pytest.fixture(scope="session")
def short_cfg():
    """Default model, 3 sampler steps: fast end-to-end checks."""
    return build_config({"schedule": {"inference_steps": 3}})
