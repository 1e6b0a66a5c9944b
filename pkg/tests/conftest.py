import numpy as np
import pytest

from manifold_control.config import preset_config
from manifold_control.pipeline import Scenario
from manifold_control.vectorfield import Rect, TaylorGreenParams, taylor_green


@pytest.fixture(scope="session")
def tg_field():
    return taylor_green(TaylorGreenParams(1.0, 1.0))


@pytest.fixture(scope="session")
def stable_scenario():
    return Scenario(preset_config("taylor_green_stable"))


@pytest.fixture(scope="session")
def mirror_scenario():
    return Scenario(preset_config("taylor_green_mirror"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def square():
    return Rect(-1.0, 1.0, -1.0, 1.0)


_ACCEPTANCE = {}


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and remember it for the summary."""

    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
